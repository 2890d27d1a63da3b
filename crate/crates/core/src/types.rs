//! Domain types shared by every stage of the pipeline.
//!
//! All spatial quantities use `(z, y, x)` axis order: array indices,
//! spacings, origins, rotations and translations alike.

use std::fmt;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `(z, y, x)` triple of physical or voxel quantities.
pub type Vec3 = [f64; 3];

/// Number of classes in the merged organ label map (background + 11 organs).
pub const ORGAN_CLASSES: u8 = 12;

/// Regular voxel grid: shape, voxel spacing in mm and world position of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
}

impl Grid {
    pub fn new(shape: [usize; 3], spacing: Vec3, origin: Vec3) -> Result<Self> {
        let grid = Grid {
            shape,
            spacing,
            origin,
        };
        grid.check()?;
        Ok(grid)
    }

    fn check(&self) -> Result<()> {
        if self.shape.iter().any(|&n| n == 0) {
            return Err(Error::Geometry(format!(
                "every axis needs at least one voxel, got shape {:?}",
                self.shape
            )));
        }
        if self.spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Geometry(format!(
                "spacing must be strictly positive, got {:?}",
                self.spacing
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!(
                "origin must be finite, got {:?}",
                self.origin
            )));
        }
        Ok(())
    }

    /// Volume of one voxel in millilitres.
    pub fn voxel_volume_ml(&self) -> f64 {
        self.spacing.iter().product::<f64>() / 1000.0
    }

    pub fn num_voxels(&self) -> usize {
        self.shape.iter().product()
    }

    /// Same shape, spacing and origin (spacing/origin compared to 1e-6 mm).
    pub fn matches(&self, other: &Grid) -> bool {
        self.shape == other.shape
            && close3(&self.spacing, &other.spacing)
            && close3(&self.origin, &other.origin)
    }
}

fn close3(a: &Vec3, b: &Vec3) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6)
}

/// A 3D scalar image with physical geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: Vec3,
    origin: Vec3,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: Vec3, origin: Vec3) -> Result<Self> {
        let (z, y, x) = data.dim();
        Grid::new([z, y, x], spacing, origin)?;
        Ok(Volume {
            data: data.as_standard_layout().into_owned(),
            spacing,
            origin,
        })
    }

    pub fn from_grid(data: Array3<f32>, grid: &Grid) -> Result<Self> {
        if data.shape() != grid.shape {
            return Err(Error::ShapeMismatch(format!(
                "data shape {:?} does not match grid shape {:?}",
                data.shape(),
                grid.shape
            )));
        }
        Volume::new(data, grid.spacing, grid.origin)
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn shape(&self) -> [usize; 3] {
        let (z, y, x) = self.data.dim();
        [z, y, x]
    }

    pub fn grid(&self) -> Grid {
        Grid {
            shape: self.shape(),
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    /// Replace the voxel data, keeping geometry.
    pub fn with_data(&self, data: Array3<f32>) -> Result<Self> {
        Volume::from_grid(data, &self.grid())
    }
}

/// A 3D map of class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: Array3<u8>,
    spacing: Vec3,
    origin: Vec3,
    num_classes: u8,
}

impl LabelMap {
    pub fn new(data: Array3<u8>, spacing: Vec3, origin: Vec3, num_classes: u8) -> Result<Self> {
        let (z, y, x) = data.dim();
        Grid::new([z, y, x], spacing, origin)?;
        if num_classes < 2 {
            return Err(Error::InvalidLabels(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if let Some(&bad) = data.iter().find(|&&v| v >= num_classes) {
            return Err(Error::InvalidLabels(format!(
                "voxel value {bad} outside [0, {num_classes})"
            )));
        }
        Ok(LabelMap {
            data: data.as_standard_layout().into_owned(),
            spacing,
            origin,
            num_classes,
        })
    }

    pub fn from_grid(data: Array3<u8>, grid: &Grid, num_classes: u8) -> Result<Self> {
        if data.shape() != grid.shape {
            return Err(Error::ShapeMismatch(format!(
                "data shape {:?} does not match grid shape {:?}",
                data.shape(),
                grid.shape
            )));
        }
        LabelMap::new(data, grid.spacing, grid.origin, num_classes)
    }

    /// All-background map on `grid`.
    pub fn zeros(grid: &Grid, num_classes: u8) -> Result<Self> {
        LabelMap::from_grid(Array3::zeros(grid.shape), grid, num_classes)
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn into_data(self) -> Array3<u8> {
        self.data
    }

    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn shape(&self) -> [usize; 3] {
        let (z, y, x) = self.data.dim();
        [z, y, x]
    }

    pub fn grid(&self) -> Grid {
        Grid {
            shape: self.shape(),
            spacing: self.spacing,
            origin: self.origin,
        }
    }

    /// Boolean mask of voxels with a non-zero label.
    pub fn foreground(&self) -> Array3<bool> {
        self.data.mapv(|v| v > 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tracer {
    #[serde(rename = "FDG", alias = "fdg")]
    Fdg,
    #[serde(rename = "PSMA", alias = "psma")]
    Psma,
    #[serde(rename = "UNKNOWN", alias = "unknown")]
    Unknown,
}

impl Tracer {
    /// Infer the tracer from a case identifier or file name prefix
    /// (`fdg_...` / `psma_...`, case-insensitive).
    pub fn from_name(name: &str) -> Tracer {
        let lower = name.to_ascii_lowercase();
        if lower.starts_with("fdg_") {
            Tracer::Fdg
        } else if lower.starts_with("psma_") {
            Tracer::Psma
        } else {
            Tracer::Unknown
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Tracer::Fdg => "FDG",
            Tracer::Psma => "PSMA",
            Tracer::Unknown => "UNKNOWN",
        }
    }
}

impl fmt::Display for Tracer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One PET/CT study with its annotations.
#[derive(Debug, Clone)]
pub struct CaseRecord {
    pub case_id: String,
    pub tracer: Tracer,
    pub pet: Volume,
    pub ct: Volume,
    pub lesion: LabelMap,
    pub organs: Option<LabelMap>,
}

impl CaseRecord {
    pub fn grid(&self) -> Grid {
        self.ct.grid()
    }

    pub fn has_lesion(&self) -> bool {
        self.lesion.data().iter().any(|&v| v > 0)
    }
}

/// A single invariant violation reported by [`validate_case`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Check every cross-field invariant of a [`CaseRecord`]. Never fails; an
/// empty list means the case is well formed.
pub fn validate_case(case: &CaseRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: &str, message: String| {
        out.push(Violation {
            field: field.to_string(),
            message,
        })
    };

    if case.case_id.trim().is_empty() {
        push("case_id", "expected a non-empty identifier".into());
    }

    let reference = case.pet.grid();
    let mut check_grid = |name: &str, grid: Grid| {
        if grid.shape != reference.shape {
            push(
                &format!("{name}.shape"),
                format!("expected {:?}, got {:?}", reference.shape, grid.shape),
            );
        }
        if !close3(&grid.spacing, &reference.spacing) {
            push(
                &format!("{name}.spacing"),
                format!("expected {:?}, got {:?}", reference.spacing, grid.spacing),
            );
        }
        if !close3(&grid.origin, &reference.origin) {
            push(
                &format!("{name}.origin"),
                format!("expected {:?}, got {:?}", reference.origin, grid.origin),
            );
        }
    };
    check_grid("ct", case.ct.grid());
    check_grid("lesion", case.lesion.grid());
    if let Some(organs) = &case.organs {
        check_grid("organs", organs.grid());
    }

    if case.lesion.num_classes() != 2 {
        push(
            "lesion.num_classes",
            format!("expected 2, got {}", case.lesion.num_classes()),
        );
    }
    if let Some(organs) = &case.organs {
        if organs.num_classes() != ORGAN_CLASSES {
            push(
                "organs.num_classes",
                format!("expected {ORGAN_CLASSES}, got {}", organs.num_classes()),
            );
        }
    }
    out
}

/// Rigid misalignment applied to one image channel: rotation about the patch
/// centre first, then translation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform {
    /// Rotation angles in degrees about the z, y and x axes.
    pub rotation_deg: Vec3,
    /// Translation in voxels along z, y and x.
    pub translation_vox: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(translation_vox: Vec3) -> Self {
        RigidTransform {
            rotation_deg: [0.0; 3],
            translation_vox,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg.iter().all(|&a| a == 0.0) && self.translation_vox.iter().all(|&t| t == 0.0)
    }

    /// Rotation matrix acting on `(z, y, x)` column vectors,
    /// `R = Rz(rz) * Ry(ry) * Rx(rx)`.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let [rz, ry, rx] = self.rotation_deg.map(f64::to_radians);
        // rotation about z mixes (y, x); about y mixes (z, x); about x mixes (z, y)
        let about_z = [
            [1.0, 0.0, 0.0],
            [0.0, rz.cos(), -rz.sin()],
            [0.0, rz.sin(), rz.cos()],
        ];
        let about_y = [
            [ry.cos(), 0.0, ry.sin()],
            [0.0, 1.0, 0.0],
            [-ry.sin(), 0.0, ry.cos()],
        ];
        let about_x = [
            [rx.cos(), -rx.sin(), 0.0],
            [rx.sin(), rx.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        matmul3(&matmul3(&about_z, &about_y), &about_x)
    }
}

pub(crate) fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Grid {
        Grid::new([4, 5, 6], [3.0, 2.04, 2.04], [0.0, 0.0, 0.0]).unwrap()
    }

    fn case() -> CaseRecord {
        let g = grid();
        CaseRecord {
            case_id: "fdg_demo".into(),
            tracer: Tracer::Fdg,
            pet: Volume::from_grid(Array3::zeros(g.shape), &g).unwrap(),
            ct: Volume::from_grid(Array3::zeros(g.shape), &g).unwrap(),
            lesion: LabelMap::zeros(&g, 2).unwrap(),
            organs: Some(LabelMap::zeros(&g, ORGAN_CLASSES).unwrap()),
        }
    }

    #[test]
    fn well_formed_case_has_no_violations() {
        assert!(validate_case(&case()).is_empty());
    }

    #[test]
    fn lesion_shape_mismatch_is_reported_once() {
        let mut c = case();
        let g = Grid::new([4, 5, 7], [3.0, 2.04, 2.04], [0.0; 3]).unwrap();
        c.lesion = LabelMap::zeros(&g, 2).unwrap();
        let v = validate_case(&c);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].field, "lesion.shape");
    }

    #[test]
    fn wrong_organ_class_count_is_reported() {
        let mut c = case();
        c.organs = Some(LabelMap::zeros(&grid(), 5).unwrap());
        let v = validate_case(&c);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "organs.num_classes");
        // pure
        assert_eq!(validate_case(&c), v);
    }

    #[test]
    fn volume_rejects_non_positive_spacing() {
        assert!(Volume::new(Array3::zeros((2, 2, 2)), [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(Volume::new(Array3::zeros((0, 2, 2)), [1.0; 3], [0.0; 3]).is_err());
    }

    #[test]
    fn label_map_rejects_out_of_range_values() {
        let mut d = Array3::zeros((2, 2, 2));
        d[[1, 1, 1]] = 2u8;
        assert!(LabelMap::new(d, [1.0; 3], [0.0; 3], 2).is_err());
    }

    #[test]
    fn tracer_prefixes() {
        assert_eq!(Tracer::from_name("fdg_0b98dbe00d_08-11-2002"), Tracer::Fdg);
        assert_eq!(Tracer::from_name("psma_abc"), Tracer::Psma);
        assert_eq!(Tracer::from_name("case_001"), Tracer::Unknown);
    }

    #[test]
    fn rotation_matrix_is_orthonormal() {
        let t = RigidTransform {
            rotation_deg: [4.0, -3.0, 2.5],
            translation_vox: [0.0; 3],
        };
        let r = t.rotation_matrix();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-12);
            }
        }
        assert_eq!(RigidTransform::identity().rotation_matrix()[1][1], 1.0);
    }
}
