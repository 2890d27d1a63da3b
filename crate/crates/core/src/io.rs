//! NIfTI-1 input/output, organ label merging and case ingestion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{resample_labels_onto, resample_onto, Interpolation};
use crate::types::{validate_case, CaseRecord, Grid, LabelMap, Tracer, Vec3, Volume, ORGAN_CLASSES};

const NIFTI_UNITS_MM: u8 = 2;
const AXIS_TOLERANCE: f64 = 1e-4;

fn read_header_and_data(path: &Path) -> Result<(NiftiHeader, Array3<f64>)> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let nifti_err = |source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nifti_err)?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    if !(3..=7).contains(&ndim) || header.dim[4..=ndim.max(3)].iter().any(|&d| d > 1) {
        return Err(Error::NonVolumetric(format!(
            "{} has dim {:?}",
            path.display(),
            &header.dim[..=ndim.min(7)]
        )));
    }
    let data = obj.into_volume().into_ndarray::<f64>().map_err(nifti_err)?;
    // nifti-rs yields (x, y, z[, 1, ...]); drop trailing singletons and flip to (z, y, x)
    let mut data = data;
    while data.ndim() > 3 {
        data = data.index_axis_move(ndarray::Axis(3), 0);
    }
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::NonVolumetric(e.to_string()))?
        .reversed_axes()
        .as_standard_layout()
        .into_owned();
    Ok((header, data))
}

/// Spacing and origin in `(z, y, x)` order. Rejects oblique orientations.
fn header_geometry(header: &NiftiHeader, path: &Path) -> Result<(Vec3, Vec3)> {
    let spacing = [
        header.pixdim[3].abs() as f64,
        header.pixdim[2].abs() as f64,
        header.pixdim[1].abs() as f64,
    ];
    let oblique = || {
        Error::Geometry(format!(
            "{}: non-axis-aligned orientation is not supported",
            path.display()
        ))
    };
    let origin_xyz = if header.sform_code > 0 {
        let rows = [header.srow_x, header.srow_y, header.srow_z];
        let scale = rows
            .iter()
            .flat_map(|r| r[..3].iter())
            .fold(0f64, |m, &v| m.max((v as f64).abs()));
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row[..3].iter().enumerate() {
                if i != j && (v as f64).abs() > AXIS_TOLERANCE * scale.max(1.0) {
                    return Err(oblique());
                }
            }
        }
        [rows[0][3] as f64, rows[1][3] as f64, rows[2][3] as f64]
    } else if header.qform_code > 0 {
        let (b, c, d) = (
            header.quatern_b as f64,
            header.quatern_c as f64,
            header.quatern_d as f64,
        );
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let off_diagonal = [
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
        ];
        if off_diagonal.iter().any(|v| v.abs() > AXIS_TOLERANCE) {
            return Err(oblique());
        }
        [
            header.quatern_x as f64,
            header.quatern_y as f64,
            header.quatern_z as f64,
        ]
    } else {
        [0.0; 3]
    };
    Ok((spacing, [origin_xyz[2], origin_xyz[1], origin_xyz[0]]))
}

/// Read a 3D NIfTI-1 image (`.nii` or `.nii.gz`) as real intensities.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let (header, data) = read_header_and_data(path)?;
    let (spacing, origin) = header_geometry(&header, path)?;
    Volume::new(data.mapv(|v| v as f32), spacing, origin)
}

/// Read an integer label image. Non-integer or out-of-range voxels are errors.
pub fn read_label_map(path: impl AsRef<Path>, num_classes: u8) -> Result<LabelMap> {
    let path = path.as_ref();
    let (header, data) = read_header_and_data(path)?;
    let (spacing, origin) = header_geometry(&header, path)?;
    if let Some(bad) = data
        .iter()
        .find(|&&v| v.fract() != 0.0 || v < 0.0 || v >= num_classes as f64)
    {
        return Err(Error::InvalidLabels(format!(
            "{}: value {bad} outside [0, {num_classes})",
            path.display()
        )));
    }
    LabelMap::new(data.mapv(|v| v as u8), spacing, origin, num_classes)
}

fn reference_header(grid: &Grid) -> NiftiHeader {
    let [sz, sy, sx] = grid.spacing.map(|v| v as f32);
    let [oz, oy, ox] = grid.origin.map(|v| v as f32);
    let mut pixdim = [1.0f32; 8];
    pixdim[1] = sx;
    pixdim[2] = sy;
    pixdim[3] = sz;
    NiftiHeader {
        pixdim,
        xyzt_units: NIFTI_UNITS_MM,
        qform_code: 1,
        sform_code: 1,
        quatern_b: 0.0,
        quatern_c: 0.0,
        quatern_d: 0.0,
        quatern_x: ox,
        quatern_y: oy,
        quatern_z: oz,
        srow_x: [sx, 0.0, 0.0, ox],
        srow_y: [0.0, sy, 0.0, oy],
        srow_z: [0.0, 0.0, sz, oz],
        ..NiftiHeader::default()
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::io(
            p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        )),
        _ => Ok(()),
    }
}

/// Write a volume as float32 NIfTI. Existing files are overwritten.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let header = reference_header(&volume.grid());
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&volume.data().view().reversed_axes())
        .map_err(|source| Error::Nifti {
            path: path.to_path_buf(),
            source,
        })
}

/// Write a label map as uint8 NIfTI. Existing files are overwritten.
pub fn write_label_map(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let header = reference_header(&labels.grid());
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&labels.data().view().reversed_axes())
        .map_err(|source| Error::Nifti {
            path: path.to_path_buf(),
            source,
        })
}

/// Ordered organ-name → class-index table for the organ supervision head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrganClassTable {
    names: Vec<&'static str>,
}

impl Default for OrganClassTable {
    fn default() -> Self {
        Self::standard()
    }
}

impl OrganClassTable {
    pub fn standard() -> Self {
        OrganClassTable {
            names: vec![
                "background",
                "spleen",
                "kidneys",
                "liver",
                "urinary_bladder",
                "lung",
                "brain",
                "heart",
                "stomach",
                "prostate",
                "parotid_glands",
                "submandibular_glands",
            ],
        }
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    pub fn num_classes(&self) -> u8 {
        self.names.len() as u8
    }

    /// Class index for an organ mask name. Accepts lateralised and singular
    /// spellings (`kidney_left`, `lung_upper_lobe_right`, `parotid_gland_r`).
    pub fn class_of(&self, name: &str) -> Option<u8> {
        let mut key = name.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        for ext in [".nii.gz", ".nii"] {
            if let Some(stripped) = key.strip_suffix(ext) {
                key = stripped.to_string();
            }
        }
        for side in ["_left", "_right", "_l", "_r"] {
            if let Some(stripped) = key.strip_suffix(side) {
                key = stripped.to_string();
                break;
            }
        }
        let canonical = match key.as_str() {
            "kidney" => "kidneys",
            "bladder" => "urinary_bladder",
            "lungs" => "lung",
            k if k.starts_with("lung_") => "lung",
            "parotid_gland" => "parotid_glands",
            "submandibular_gland" => "submandibular_glands",
            k => k,
        };
        self.names
            .iter()
            .position(|&n| n == canonical)
            .filter(|&i| i > 0)
            .map(|i| i as u8)
    }
}

/// Merge binary per-organ masks into one organ label map on `grid`.
///
/// Overlapping voxels take the highest class index; unclaimed voxels are 0.
/// Iteration order of `masks` never affects the result.
pub fn merge_organ_labels(
    masks: &BTreeMap<String, LabelMap>,
    table: &OrganClassTable,
    grid: &Grid,
) -> Result<LabelMap> {
    let mut ordered = Vec::with_capacity(masks.len());
    for (name, mask) in masks {
        let class = table
            .class_of(name)
            .ok_or_else(|| Error::UnknownOrgan(name.clone()))?;
        if !mask.grid().matches(grid) {
            return Err(Error::Geometry(format!(
                "organ mask `{name}` geometry {:?} differs from {:?}",
                mask.grid(),
                grid
            )));
        }
        ordered.push((class, mask));
    }
    ordered.sort_by_key(|(class, _)| *class);

    let mut merged = Array3::<u8>::zeros(grid.shape);
    for (class, mask) in ordered {
        ndarray::Zip::from(&mut merged)
            .and(mask.data())
            .for_each(|out, &m| {
                if m > 0 {
                    *out = (*out).max(class);
                }
            });
    }
    LabelMap::from_grid(merged, grid, table.num_classes())
}

/// Organ annotations for one case: a merged map or per-organ binary masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OrganSource {
    Merged(PathBuf),
    Masks(BTreeMap<String, PathBuf>),
}

/// One entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CasePaths {
    #[serde(default)]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracer: Option<Tracer>,
    pub pet: PathBuf,
    pub ct: PathBuf,
    pub lesion: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub organs: Option<OrganSource>,
}

impl CasePaths {
    pub fn resolved_case_id(&self) -> String {
        self.case_id.clone().unwrap_or_else(|| {
            let name = self
                .pet
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let stem = name
                .trim_end_matches(".gz")
                .trim_end_matches(".nii")
                .to_string();
            stem.trim_end_matches("_pet").trim_end_matches("_PET").to_string()
        })
    }

    fn rebased(&self, base: &Path) -> CasePaths {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        CasePaths {
            case_id: Some(self.resolved_case_id()),
            tracer: self.tracer,
            pet: join(&self.pet),
            ct: join(&self.ct),
            lesion: join(&self.lesion),
            organs: self.organs.as_ref().map(|o| match o {
                OrganSource::Merged(p) => OrganSource::Merged(join(p)),
                OrganSource::Masks(m) => {
                    OrganSource::Masks(m.iter().map(|(k, v)| (k.clone(), join(v))).collect())
                }
            }),
        }
    }
}

/// Dataset manifest. Paths inside are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub cases: Vec<CasePaths>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ManifestDoc {
    Wrapped(DatasetManifest),
    Bare(Vec<CasePaths>),
}

impl DatasetManifest {
    /// Load a manifest (`{"cases": [...]}` or a bare list) with paths made absolute.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ManifestDoc = serde_json::from_str(&text)?;
        let manifest = match doc {
            ManifestDoc::Wrapped(m) => m,
            ManifestDoc::Bare(cases) => DatasetManifest { cases },
        };
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(DatasetManifest {
            cases: manifest.cases.iter().map(|c| c.rebased(base)).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Tracer from the manifest tag, else the case id prefix, else the PET file name.
pub fn infer_tracer(paths: &CasePaths, case_id: &str) -> Tracer {
    paths.tracer.unwrap_or_else(|| {
        let from_id = Tracer::from_name(case_id);
        if from_id != Tracer::Unknown {
            return from_id;
        }
        paths
            .pet
            .file_name()
            .map(|n| Tracer::from_name(&n.to_string_lossy()))
            .unwrap_or(Tracer::Unknown)
    })
}

/// Load one case. PET and label maps that are not on the CT grid are
/// resampled onto it (linear for PET, nearest for labels).
pub fn ingest_case(paths: &CasePaths) -> Result<CaseRecord> {
    let case_id = paths.resolved_case_id();
    let tracer = infer_tracer(paths, &case_id);

    let ct = read_volume(&paths.ct)?;
    let grid = ct.grid();
    let mut pet = read_volume(&paths.pet)?;
    if !pet.grid().matches(&grid) {
        pet = resample_onto(&pet, &grid, Interpolation::Linear)?;
    }
    let lesion = match read_label_map(&paths.lesion, 2) {
        Ok(l) => l,
        Err(Error::InvalidLabels(msg)) => {
            return Err(Error::InvalidLabels(format!(
                "lesion map must be binary {{0, 1}}: {msg}"
            )))
        }
        Err(e) => return Err(e),
    };
    let lesion = align_labels(lesion, &grid)?;

    let table = OrganClassTable::standard();
    let organs = match &paths.organs {
        None => None,
        Some(OrganSource::Merged(p)) => Some(align_labels(read_label_map(p, ORGAN_CLASSES)?, &grid)?),
        Some(OrganSource::Masks(files)) => {
            let mut masks = BTreeMap::new();
            for (name, p) in files {
                if table.class_of(name).is_none() {
                    return Err(Error::UnknownOrgan(name.clone()));
                }
                masks.insert(name.clone(), align_labels(read_label_map(p, 2)?, &grid)?);
            }
            Some(merge_organ_labels(&masks, &table, &grid)?)
        }
    };

    let case = CaseRecord {
        case_id,
        tracer,
        pet,
        ct,
        lesion,
        organs,
    };
    let violations = validate_case(&case);
    if let Some(v) = violations.first() {
        return Err(Error::Geometry(format!("case {}: {v}", case.case_id)));
    }
    Ok(case)
}

fn align_labels(labels: LabelMap, grid: &Grid) -> Result<LabelMap> {
    if labels.grid().matches(grid) {
        // snap tiny header rounding differences onto the reference grid
        LabelMap::from_grid(labels.data().clone(), grid, labels.num_classes())
    } else {
        resample_labels_onto(&labels, grid)
    }
}

/// Write the CT, PET and label maps of a case next to each other and return
/// their manifest entry (paths relative to `dir`).
pub fn write_case(case: &CaseRecord, dir: impl AsRef<Path>) -> Result<CasePaths> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let id = &case.case_id;
    let rel = |suffix: &str| PathBuf::from(format!("{id}_{suffix}.nii.gz"));
    write_volume(&case.pet, dir.join(rel("pet")))?;
    write_volume(&case.ct, dir.join(rel("ct")))?;
    write_label_map(&case.lesion, dir.join(rel("lesion")))?;
    let organs = match &case.organs {
        Some(o) => {
            write_label_map(o, dir.join(rel("organs")))?;
            Some(OrganSource::Merged(rel("organs")))
        }
        None => None,
    };
    Ok(CasePaths {
        case_id: Some(id.clone()),
        tracer: Some(case.tracer),
        pet: rel("pet"),
        ct: rel("ct"),
        lesion: rel("lesion"),
        organs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new([4, 5, 6], [3.0, 2.04, 2.04], [-10.0, 5.5, 2.0]).unwrap()
    }

    fn mask_with(grid: &Grid, voxels: &[[usize; 3]]) -> LabelMap {
        let mut d = Array3::zeros(grid.shape);
        for &v in voxels {
            d[v] = 1u8;
        }
        LabelMap::from_grid(d, grid, 2).unwrap()
    }

    #[test]
    fn organ_table_is_contiguous_and_unique() {
        let t = OrganClassTable::standard();
        assert_eq!(t.num_classes(), 12);
        let mut names = t.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 12);
        assert_eq!(t.class_of("liver"), Some(3));
        assert_eq!(t.class_of("kidney_left"), Some(2));
        assert_eq!(t.class_of("kidney_right"), Some(2));
        assert_eq!(t.class_of("lung_upper_lobe_left"), Some(5));
        assert_eq!(t.class_of("submandibular_gland_r"), Some(11));
        assert_eq!(t.class_of("background"), None);
        assert_eq!(t.class_of("pancreas"), None);
    }

    #[test]
    fn empty_merge_is_all_zero() {
        let g = grid();
        let out = merge_organ_labels(&BTreeMap::new(), &OrganClassTable::standard(), &g).unwrap();
        assert!(out.data().iter().all(|&v| v == 0));
        assert_eq!(out.num_classes(), 12);
    }

    #[test]
    fn overlap_goes_to_higher_class() {
        let g = grid();
        let mut masks = BTreeMap::new();
        masks.insert("stomach".to_string(), mask_with(&g, &[[1, 1, 1], [2, 2, 2]]));
        masks.insert("liver".to_string(), mask_with(&g, &[[1, 1, 1], [0, 0, 0]]));
        let out = merge_organ_labels(&masks, &OrganClassTable::standard(), &g).unwrap();
        assert_eq!(out.data()[[1, 1, 1]], 8);
        assert_eq!(out.data()[[0, 0, 0]], 3);
        assert_eq!(out.data()[[2, 2, 2]], 8);
    }

    #[test]
    fn lateralised_masks_share_a_class() {
        let g = grid();
        let mut masks = BTreeMap::new();
        masks.insert("kidney_left".to_string(), mask_with(&g, &[[0, 0, 0]]));
        masks.insert("kidney_right".to_string(), mask_with(&g, &[[3, 4, 5]]));
        let out = merge_organ_labels(&masks, &OrganClassTable::standard(), &g).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 2).count(), 2);
    }

    #[test]
    fn merge_rejects_unknown_names_and_geometry() {
        let g = grid();
        let mut masks = BTreeMap::new();
        masks.insert("pancreas".to_string(), mask_with(&g, &[]));
        assert!(matches!(
            merge_organ_labels(&masks, &OrganClassTable::standard(), &g),
            Err(Error::UnknownOrgan(_))
        ));
        let other = Grid::new([4, 5, 7], g.spacing, g.origin).unwrap();
        let mut masks = BTreeMap::new();
        masks.insert("liver".to_string(), mask_with(&other, &[]));
        assert!(matches!(
            merge_organ_labels(&masks, &OrganClassTable::standard(), &g),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn volume_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let data = Array3::from_shape_fn(g.shape, |(z, y, x)| (z * 100 + y * 10 + x) as f32 * 0.37 - 3.0);
        let v = Volume::from_grid(data, &g).unwrap();
        let path = dir.path().join("v.nii.gz");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data(), v.data());
        for i in 0..3 {
            assert!((back.spacing()[i] - g.spacing[i]).abs() < 1e-6);
            assert!((back.origin()[i] - g.origin[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn label_maps_are_written_as_integers_and_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let path = dir.path().join("l.nii.gz");
        write_label_map(&mask_with(&g, &[[1, 2, 3]]), &path).unwrap();
        write_label_map(&mask_with(&g, &[[0, 0, 1]]), &path).unwrap();
        let header = nifti::NiftiHeader::from_file(&path).unwrap();
        assert_eq!(header.data_type().unwrap(), nifti::NiftiType::Uint8);
        let back = read_label_map(&path, 2).unwrap();
        assert_eq!(back.data()[[0, 0, 1]], 1);
        assert_eq!(back.data()[[1, 2, 3]], 0);
    }

    #[test]
    fn four_dimensional_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("4d.nii");
        let data = ndarray::Array4::<f32>::zeros((3, 3, 3, 2));
        WriterOptions::new(&path).write_nifti(&data).unwrap();
        let err = read_volume(&path).unwrap_err();
        assert!(matches!(err, Error::NonVolumetric(_)), "{err}");
        assert!(err.to_string().contains("non-3D image"));
    }

    #[test]
    fn missing_file_is_reported() {
        assert!(matches!(
            read_volume("/nonexistent/x.nii.gz"),
            Err(Error::MissingFile(_))
        ));
    }
}
