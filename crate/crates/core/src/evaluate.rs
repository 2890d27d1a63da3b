//! Lesion Dice, false-positive and false-negative volume, and report emission.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_label_map, DatasetManifest};
use crate::types::{Tracer, Vec3};

/// Dice assigned when both prediction and ground truth are empty.
pub const EMPTY_DICE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Face,
    #[default]
    #[serde(rename = "18")]
    Edge,
    #[serde(rename = "26")]
    Corner,
}

impl Connectivity {
    pub fn from_neighbours(n: usize) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Face),
            18 => Ok(Connectivity::Edge),
            26 => Ok(Connectivity::Corner),
            _ => Err(Error::InvalidArgument(format!("connectivity must be 6, 18 or 26, got {n}"))),
        }
    }

    pub fn neighbours(self) -> usize {
        match self {
            Connectivity::Face => 6,
            Connectivity::Edge => 18,
            Connectivity::Corner => 26,
        }
    }

    /// Neighbour offsets: non-zero offsets with at most 1, 2 or 3 non-zero components.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Face => 1,
            Connectivity::Edge => 2,
            Connectivity::Corner => 3,
        };
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let nz = [dz, dy, dx].iter().filter(|&&v| v != 0).count();
                    if nz > 0 && nz <= max_nonzero {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

fn same_shape(a: &ArrayView3<bool>, b: &ArrayView3<bool>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, or [`EMPTY_DICE`] when both are empty.
pub fn dice_score(pred: &ArrayView3<bool>, gt: &ArrayView3<bool>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    Zip::from(pred).and(gt).for_each(|&a, &b| {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    });
    if p + g == 0 {
        return Ok(EMPTY_DICE);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Labelled components: `labels` holds 0 for background and `1..=sizes.len()`
/// otherwise, numbered in raster order of each component's first voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub labels: Array3<u32>,
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

pub fn connected_components(mask: &ArrayView3<bool>, connectivity: Connectivity) -> Components {
    let dims = mask.dim();
    let shape = [dims.0 as isize, dims.1 as isize, dims.2 as isize];
    let offsets = connectivity.offsets();
    let mut labels = Array3::<u32>::zeros(dims);
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for ((z, y, x), &on) in mask.indexed_iter() {
        if !on || labels[[z, y, x]] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut size = 0;
        labels[[z, y, x]] = id;
        queue.push_back([z as isize, y as isize, x as isize]);
        while let Some(v) = queue.pop_front() {
            size += 1;
            for o in &offsets {
                let n = [v[0] + o[0], v[1] + o[1], v[2] + o[2]];
                if (0..3).any(|a| n[a] < 0 || n[a] >= shape[a]) {
                    continue;
                }
                let idx = [n[0] as usize, n[1] as usize, n[2] as usize];
                if mask[idx] && labels[idx] == 0 {
                    labels[idx] = id;
                    queue.push_back(n);
                }
            }
        }
        sizes.push(size);
    }
    Components { labels, sizes }
}

/// Millilitres per voxel for a `(z, y, x)` spacing in mm.
pub fn voxel_volume_ml(spacing: Vec3) -> f64 {
    spacing.iter().product::<f64>() / 1000.0
}

/// Voxel count of components of `a` that share no voxel with `b`.
fn unmatched_voxels(a: &ArrayView3<bool>, b: &ArrayView3<bool>, connectivity: Connectivity) -> usize {
    let comps = connected_components(a, connectivity);
    let mut touched = vec![false; comps.count() + 1];
    Zip::from(&comps.labels).and(b).for_each(|&l, &hit| {
        if l != 0 && hit {
            touched[l as usize] = true;
        }
    });
    comps
        .sizes
        .iter()
        .enumerate()
        .filter(|(i, _)| !touched[i + 1])
        .map(|(_, &s)| s)
        .sum()
}

/// Volume (mL) of predicted components with no ground-truth overlap.
pub fn false_positive_volume(pred: &ArrayView3<bool>, gt: &ArrayView3<bool>, spacing: Vec3, connectivity: Connectivity) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(unmatched_voxels(pred, gt, connectivity) as f64 * voxel_volume_ml(spacing))
}

/// Volume (mL) of ground-truth components with no predicted overlap.
pub fn false_negative_volume(pred: &ArrayView3<bool>, gt: &ArrayView3<bool>, spacing: Vec3, connectivity: Connectivity) -> Result<f64> {
    same_shape(pred, gt)?;
    Ok(unmatched_voxels(gt, pred, connectivity) as f64 * voxel_volume_ml(spacing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub tracer: Tracer,
    pub dice: f64,
    pub fpvol_ml: f64,
    pub fnvol_ml: f64,
}

pub fn evaluate_case(
    case_id: &str,
    tracer: Tracer,
    pred: &ArrayView3<bool>,
    gt: &ArrayView3<bool>,
    spacing: Vec3,
    connectivity: Connectivity,
) -> Result<CaseMetrics> {
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        tracer,
        dice: dice_score(pred, gt)?,
        fpvol_ml: false_positive_volume(pred, gt, spacing, connectivity)?,
        fnvol_ml: false_negative_volume(pred, gt, spacing, connectivity)?,
    })
}

/// One prediction/ground-truth pair.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub case_id: String,
    pub tracer: Tracer,
    pub pred: Array3<bool>,
    pub gt: Array3<bool>,
    pub spacing: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_cases: usize,
    pub n_fdg: usize,
    pub n_psma: usize,
    pub dice_all: f64,
    pub dice_fdg: Option<f64>,
    pub dice_psma: Option<f64>,
    pub fpvol_ml: f64,
    pub fnvol_ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: Vec<CaseMetrics>,
    pub aggregates: Aggregates,
    pub connectivity: Connectivity,
    pub empty_dice: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl EvalReport {
    /// Aggregate per-case metrics; case ids must be unique.
    pub fn from_cases(mut cases: Vec<CaseMetrics>, connectivity: Connectivity) -> Result<Self> {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        if let Some(w) = cases.windows(2).find(|w| w[0].case_id == w[1].case_id) {
            return Err(Error::InvalidArgument(format!("case `{}` evaluated twice", w[0].case_id)));
        }
        let of = |t: Tracer| cases.iter().filter(move |c| c.tracer == t);
        let aggregates = Aggregates {
            n_cases: cases.len(),
            n_fdg: of(Tracer::Fdg).count(),
            n_psma: of(Tracer::Psma).count(),
            dice_all: mean(cases.iter().map(|c| c.dice)).unwrap_or(f64::NAN),
            dice_fdg: mean(of(Tracer::Fdg).map(|c| c.dice)),
            dice_psma: mean(of(Tracer::Psma).map(|c| c.dice)),
            fpvol_ml: mean(cases.iter().map(|c| c.fpvol_ml)).unwrap_or(f64::NAN),
            fnvol_ml: mean(cases.iter().map(|c| c.fnvol_ml)).unwrap_or(f64::NAN),
        };
        Ok(EvalReport {
            cases,
            aggregates,
            connectivity,
            empty_dice: EMPTY_DICE,
        })
    }

    /// Plain-text table: Dice (All, FDG, PSMA), FPvol, FNvol. Dice in percent.
    pub fn to_table(&self, setting: &str) -> String {
        let mut s = comparison_table(&[(setting, self)]);
        let a = &self.aggregates;
        let _ = writeln!(
            s,
            "cases: {} (FDG {}, PSMA {}); connectivity {}; empty/empty Dice = {}",
            a.n_cases,
            a.n_fdg,
            a.n_psma,
            self.connectivity.neighbours(),
            self.empty_dice
        );
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for c in &self.cases {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes `metrics.csv`, `report.json` and `table.txt` into `dir`.
    pub fn write_all(&self, dir: impl AsRef<Path>, setting: &str) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("metrics.csv");
        let json = dir.join("report.json");
        let table = dir.join("table.txt");
        self.write_csv(&csv)?;
        self.write_json(&json)?;
        std::fs::write(&table, self.to_table(setting)).map_err(|e| Error::io(&table, e))?;
        Ok(vec![csv, json, table])
    }
}

/// One row per setting, in the given order.
pub fn comparison_table(rows: &[(&str, &EvalReport)]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |d| format!("{:.2}", 100.0 * d));
    let width = rows.iter().map(|(name, _)| name.chars().count()).max().unwrap_or(0).max(28);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$} {:>9} {:>9} {:>9} {:>10} {:>10}",
        "Setting", "Dice All", "Dice FDG", "Dice PSMA", "FPvol mL", "FNvol mL"
    );
    for (name, r) in rows {
        let a = &r.aggregates;
        let _ = writeln!(
            s,
            "{:<width$} {:>9} {:>9} {:>9} {:>10.2} {:>10.2}",
            name,
            pct(Some(a.dice_all)),
            pct(a.dice_fdg),
            pct(a.dice_psma),
            a.fpvol_ml,
            a.fnvol_ml
        );
    }
    s
}

pub fn evaluate_dataset(pairs: &[EvalPair], connectivity: Connectivity) -> Result<EvalReport> {
    let cases = pairs
        .iter()
        .map(|p| evaluate_case(&p.case_id, p.tracer, &p.pred.view(), &p.gt.view(), p.spacing, connectivity))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_cases(cases, connectivity)
}

/// Path of the persisted prediction for `case_id`.
pub fn prediction_path(dir: impl AsRef<Path>, case_id: &str) -> PathBuf {
    dir.as_ref().join(format!("{case_id}_pred.nii.gz"))
}

/// Evaluate `<case_id>_pred.nii.gz` files in `pred_dir` against the lesion
/// masks of `manifest`. Every manifest case must have a prediction; with
/// `only` set, just those case ids are evaluated.
pub fn evaluate_prediction_dir(
    pred_dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    only: Option<&BTreeSet<String>>,
    connectivity: Connectivity,
) -> Result<EvalReport> {
    let mut cases = Vec::new();
    for paths in &manifest.cases {
        let id = paths.resolved_case_id();
        if only.is_some_and(|set| !set.contains(&id)) {
            continue;
        }
        let pred_path = prediction_path(&pred_dir, &id);
        if !pred_path.is_file() {
            return Err(Error::MissingFile(pred_path));
        }
        let gt = read_label_map(&paths.lesion, 2)?;
        let pred = read_label_map(&pred_path, 2)?;
        if !pred.grid().matches(&gt.grid()) {
            return Err(Error::Geometry(format!(
                "prediction for `{id}` is not on the ground-truth grid"
            )));
        }
        let tracer = crate::io::infer_tracer(paths, &id);
        cases.push(evaluate_case(
            &id,
            tracer,
            &pred.foreground().view(),
            &gt.foreground().view(),
            gt.spacing(),
            connectivity,
        )?);
    }
    EvalReport::from_cases(cases, connectivity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;

    fn mask(shape: (usize, usize, usize), on: &[[usize; 3]]) -> Array3<bool> {
        let mut m = Array3::from_elem(shape, false);
        for v in on {
            m[*v] = true;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let gt = mask((1, 1, 8), &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let pred = mask((1, 1, 8), &[[0, 0, 0], [0, 0, 1], [0, 0, 6]]);
        assert!((dice_score(&pred.view(), &gt.view()).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(dice_score(&gt.view(), &gt.view()).unwrap(), 1.0);
        let empty = Array3::from_elem((2, 2, 2), false);
        assert_eq!(dice_score(&empty.view(), &empty.view()).unwrap(), 1.0);
        assert!(dice_score(&empty.view(), &gt.view()).is_err());
    }

    #[test]
    fn component_connectivity() {
        let corner = mask((2, 2, 2), &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(connected_components(&corner.view(), Connectivity::Edge).count(), 2);
        assert_eq!(connected_components(&corner.view(), Connectivity::Corner).count(), 1);
        let edge = mask((2, 2, 2), &[[0, 0, 0], [0, 1, 1]]);
        assert_eq!(connected_components(&edge.view(), Connectivity::Edge).count(), 1);
        assert_eq!(connected_components(&edge.view(), Connectivity::Face).count(), 2);
        let cube = Array3::from_elem((3, 3, 3), true);
        assert_eq!(connected_components(&cube.view(), Connectivity::Edge).sizes, vec![27]);
        let single = mask((3, 3, 3), &[[1, 1, 1]]);
        assert_eq!(connected_components(&single.view(), Connectivity::Edge).sizes, vec![1]);
        assert_eq!(Connectivity::Edge.offsets().len(), 18);
    }

    #[test]
    fn volume_examples() {
        let spacing = [3.0, 2.04, 2.04];
        let empty = Array3::from_elem((4, 4, 4), false);
        let mut pred = empty.clone();
        pred.slice_mut(s![0, 0, ..]).fill(true);
        pred.slice_mut(s![2, 0..3, 0..2]).fill(true);
        let fp = false_positive_volume(&pred.view(), &empty.view(), spacing, Connectivity::Edge).unwrap();
        assert!((fp - 0.124848).abs() < 1e-9);
        assert_eq!(false_negative_volume(&empty.view(), &pred.view(), spacing, Connectivity::Edge).unwrap(), fp);

        let mut gt = empty.clone();
        gt.slice_mut(s![0, 0, 0..4]).fill(true);
        gt[[0, 1, 0]] = true;
        gt.slice_mut(s![3, 3, 0..4]).fill(true);
        gt.slice_mut(s![3, 1, 0..3]).fill(true);
        let first = mask((4, 4, 4), &[[0, 0, 2]]);
        let fn_ml = false_negative_volume(&first.view(), &gt.view(), spacing, Connectivity::Edge).unwrap();
        assert!((fn_ml - 7.0 * voxel_volume_ml(spacing)).abs() < 1e-12);
        assert_eq!(false_positive_volume(&first.view(), &gt.view(), spacing, Connectivity::Edge).unwrap(), 0.0);
    }

    #[test]
    fn report_means_and_tracer_groups() {
        let m = |id: &str, t, d| CaseMetrics {
            case_id: id.into(),
            tracer: t,
            dice: d,
            fpvol_ml: 1.0,
            fnvol_ml: 2.0,
        };
        let r = EvalReport::from_cases(
            vec![m("a", Tracer::Fdg, 0.5), m("b", Tracer::Psma, 1.0), m("c", Tracer::Fdg, 0.25)],
            Connectivity::Edge,
        )
        .unwrap();
        assert!((r.aggregates.dice_all - 1.75 / 3.0).abs() < 1e-12);
        assert_eq!(r.aggregates.dice_fdg, Some(0.375));
        assert_eq!(r.aggregates.dice_psma, Some(1.0));
        assert!(r.to_table("baseline").contains("Dice PSMA"));
        let dup = EvalReport::from_cases(vec![m("a", Tracer::Fdg, 0.5), m("a", Tracer::Fdg, 0.5)], Connectivity::Edge);
        assert!(dup.is_err());
    }
}
