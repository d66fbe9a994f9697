//! Dense labeled voxel volumes and the voxel ↔ model-space transform.
//!
//! On disk a volume is a JSON header plus a raw blob of one byte per voxel,
//! x fastest (`x + y*dx + z*dx*dy`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default class count: 18 segmental classes plus one trunk class.
pub const DEFAULT_NUM_CLASSES: u8 = 19;

pub type Voxel = [usize; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    num_classes: u8,
    data: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    num_classes: u8,
    blob: String,
}

impl LabelVolume {
    /// All-background volume.
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], num_classes: u8) -> Self {
        let len = dims.iter().product();
        Self { dims, spacing, num_classes, data: vec![0; len] }
    }

    pub fn from_data(dims: [usize; 3], spacing: [f64; 3], num_classes: u8, data: Vec<u8>) -> Result<Self> {
        validate_dims(dims, spacing)?;
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::SizeMismatch { expected, actual: data.len() });
        }
        if let Some(&bad) = data.iter().find(|&&l| l > num_classes) {
            return Err(Error::LabelOutOfRange { label: bad as u32, num_classes: num_classes as u32 });
        }
        Ok(Self { dims, spacing, num_classes, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, v: Voxel) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    #[inline]
    pub fn voxel_of(&self, index: usize) -> Voxel {
        let x = index % self.dims[0];
        let rest = index / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn contains(&self, v: [i64; 3]) -> bool {
        (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < self.dims[a])
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> u8 {
        self.data[self.index(v)]
    }

    /// Out-of-grid coordinates read as background.
    #[inline]
    pub fn get_signed(&self, v: [i64; 3]) -> u8 {
        if self.contains(v) {
            self.get([v[0] as usize, v[1] as usize, v[2] as usize])
        } else {
            0
        }
    }

    /// Panics when `label` exceeds the declared class count.
    pub fn set(&mut self, v: Voxel, label: u8) {
        assert!(label <= self.num_classes, "label {label} > {}", self.num_classes);
        let i = self.index(v);
        self.data[i] = label;
    }

    /// Copy with every foreground label collapsed to 1.
    pub fn binarized(&self) -> LabelVolume {
        LabelVolume {
            dims: self.dims,
            spacing: self.spacing,
            num_classes: self.num_classes.max(1),
            data: self.data.iter().map(|&l| u8::from(l != 0)).collect(),
        }
    }

    /// Copy sharing geometry but with every voxel reset to background.
    pub fn empty_like(&self) -> LabelVolume {
        LabelVolume::zeros(self.dims, self.spacing, self.num_classes)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }

    /// Non-background voxels in z-major, then y, then x order.
    pub fn foreground_voxels(&self) -> Vec<(Voxel, u8)> {
        self.data.iter().enumerate().filter(|(_, &l)| l != 0).map(|(i, &l)| (self.voxel_of(i), l)).collect()
    }
}

fn validate_dims(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Invalid(format!("volume dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Invalid(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

fn blob_path(header: &Path, blob: &str) -> PathBuf {
    header.parent().map(|p| p.join(blob)).unwrap_or_else(|| PathBuf::from(blob))
}

/// Reads a `<name>.json` header and the blob it names (relative to the header).
pub fn load_volume(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    let blob = blob_path(path, &header.blob);
    let data = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    LabelVolume::from_data(header.dims, header.spacing, header.num_classes, data)
}

/// Writes `path` (the JSON header) and a sibling `<stem>.u8` blob.
pub fn save_volume(vol: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Invalid(format!("bad volume path {}", path.display())))?;
    let blob_name = format!("{stem}.u8");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header =
        VolumeHeader { dims: vol.dims, spacing: vol.spacing, num_classes: vol.num_classes, blob: blob_name.clone() };
    let blob = blob_path(path, &blob_name);
    fs::write(&blob, &vol.data).map_err(|e| Error::io(&blob, e))?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Maps voxel indices into the normalized model space and back.
///
/// `normalized = (voxel * spacing - offset) * scale`, with a single scale so
/// Euclidean distances are preserved up to one factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoordTransform {
    pub offset: [f64; 3],
    pub scale: f64,
    pub spacing: [f64; 3],
}

impl CoordTransform {
    pub fn identity() -> Self {
        Self { offset: [0.0; 3], scale: 1.0, spacing: [1.0; 3] }
    }

    pub fn to_normalized(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (v[a] * self.spacing[a] - self.offset[a]) * self.scale)
    }

    pub fn voxel_to_normalized(&self, v: Voxel) -> [f64; 3] {
        self.to_normalized([v[0] as f64, v[1] as f64, v[2] as f64])
    }

    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] / self.scale + self.offset[a]) / self.spacing[a])
    }

    /// Length of one millimetre in normalized units.
    pub fn unit_length(&self) -> f64 {
        self.scale
    }
}

/// Centers the physical foreground bounding box and scales its longest axis
/// to span `[-1, 1]`. A single-voxel foreground gets `scale = 1`.
pub fn make_transform(vol: &LabelVolume) -> Result<CoordTransform> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut any = false;
    for (i, &l) in vol.data.iter().enumerate() {
        if l == 0 {
            continue;
        }
        any = true;
        let v = vol.voxel_of(i);
        for a in 0..3 {
            let p = v[a] as f64 * vol.spacing[a];
            lo[a] = lo[a].min(p);
            hi[a] = hi[a].max(p);
        }
    }
    if !any {
        return Err(Error::EmptyForeground);
    }
    let offset = std::array::from_fn(|a| 0.5 * (lo[a] + hi[a]));
    let half = (0..3).map(|a| 0.5 * (hi[a] - lo[a])).fold(0.0, f64::max);
    let scale = if half > 0.0 { 1.0 / half } else { 1.0 };
    Ok(CoordTransform { offset, scale, spacing: vol.spacing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64, fill: f64) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.iter().product::<usize>())
            .map(|_| if rng.gen_bool(fill) { rng.gen_range(1..=19) } else { 0 })
            .collect();
        LabelVolume::from_data(dims, [0.7, 0.7, 1.25], 19, data).unwrap()
    }

    #[test]
    fn all_background_volume_loads() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.u8"), [0u8; 64]).unwrap();
        fs::write(dir.path().join("v.json"), r#"{"dims":[4,4,4],"spacing":[1,1,1],"num_classes":19,"blob":"v.u8"}"#)
            .unwrap();
        let v = load_volume(dir.path().join("v.json")).unwrap();
        assert_eq!(v.dims(), [4, 4, 4]);
        assert_eq!(v.foreground_count(), 0);
    }

    #[test]
    fn short_blob_is_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.u8"), [0u8; 7]).unwrap();
        fs::write(dir.path().join("v.json"), r#"{"dims":[2,2,2],"spacing":[1,1,1],"num_classes":19,"blob":"v.u8"}"#)
            .unwrap();
        let err = load_volume(dir.path().join("v.json")).unwrap_err();
        assert!(matches!(err, Error::SizeMismatch { expected: 8, actual: 7 }));
    }

    #[test]
    fn label_above_header_class_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.u8"), [0u8, 9]).unwrap();
        fs::write(dir.path().join("v.json"), r#"{"dims":[2,1,1],"spacing":[1,1,1],"num_classes":8,"blob":"v.u8"}"#)
            .unwrap();
        let err = load_volume(dir.path().join("v.json")).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 9, num_classes: 8 }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_volume("/nonexistent/volume.json").unwrap_err();
        assert_eq!(err.kind(), "io");
    }

    #[test]
    fn single_voxel_volume_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let v = LabelVolume::zeros([1, 1, 1], [1.0; 3], 19);
        let p = dir.path().join("one.json");
        save_volume(&v, &p).unwrap();
        assert_eq!(fs::read(dir.path().join("one.u8")).unwrap().len(), 1);
        assert_eq!(load_volume(&p).unwrap(), v);
    }

    #[test]
    fn header_declares_nineteen_classes() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = LabelVolume::zeros([3, 3, 3], [1.0; 3], DEFAULT_NUM_CLASSES);
        v.set([1, 1, 1], 19);
        let p = dir.path().join("c.json");
        save_volume(&v, &p).unwrap();
        let header: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(header["num_classes"], 19);
    }

    #[test]
    fn random_volumes_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for (dims, seed) in [([32, 32, 32], 1), ([64, 64, 64], 2)] {
            let v = random_volume(dims, seed, 0.3);
            let p = dir.path().join(format!("r{seed}.json"));
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.data(), v.data());
            assert_eq!(back, v);
        }
    }

    #[test]
    fn foreground_listing() {
        let v = LabelVolume::zeros([4, 4, 4], [1.0; 3], 19);
        assert!(v.foreground_voxels().is_empty());
        let mut v = LabelVolume::zeros([4, 4, 4], [1.0; 3], 19);
        v.set([1, 2, 3], 5);
        assert_eq!(v.foreground_voxels(), vec![([1, 2, 3], 5)]);
    }

    #[test]
    fn foreground_count_matches_brute_force_and_rebuilds_volume() {
        let v = random_volume([9, 7, 5], 11, 0.4);
        let mut brute = 0;
        for z in 0..5 {
            for y in 0..7 {
                for x in 0..9 {
                    if v.get([x, y, z]) != 0 {
                        brute += 1;
                    }
                }
            }
        }
        let fg = v.foreground_voxels();
        assert_eq!(fg.len(), brute);
        let keys: Vec<_> = fg.iter().map(|(p, _)| (p[2], p[1], p[0])).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]), "strict z,y,x order");
        let mut rebuilt = v.empty_like();
        for (p, l) in fg {
            rebuilt.set(p, l);
        }
        assert_eq!(rebuilt, v);
    }

    #[test]
    fn transform_maps_longest_axis_to_unit_half_extent() {
        let mut v = LabelVolume::zeros([64, 8, 8], [1.0; 3], 19);
        for x in 0..64 {
            v.set([x, 4, 4], 1);
        }
        let t = make_transform(&v).unwrap();
        let a = t.voxel_to_normalized([0, 4, 4]);
        let b = t.voxel_to_normalized([63, 4, 4]);
        assert!((b[0] - a[0] - 2.0).abs() < 1e-12);
        assert!((a[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_voxel_transform_is_unit_scale_centered() {
        let mut v = LabelVolume::zeros([5, 5, 5], [1.0, 1.0, 2.0], 19);
        v.set([2, 3, 1], 4);
        let t = make_transform(&v).unwrap();
        assert_eq!(t.scale, 1.0);
        assert_eq!(t.voxel_to_normalized([2, 3, 1]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_foreground_transform_errors() {
        let v = LabelVolume::zeros([3, 3, 3], [1.0; 3], 19);
        assert!(matches!(make_transform(&v), Err(Error::EmptyForeground)));
    }

    #[test]
    fn anisotropic_spacing_enters_normalization() {
        let mut v = LabelVolume::zeros([10, 10, 10], [1.0, 1.0, 3.0], 19);
        v.set([0, 0, 0], 1);
        v.set([2, 0, 2], 1);
        let t = make_transform(&v).unwrap();
        // z extent is 6 mm, x extent 2 mm: z is the longest axis.
        let p = t.voxel_to_normalized([2, 0, 2]);
        assert!((p[2] - 1.0).abs() < 1e-12);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalized_foreground_within_unit_cube_and_inverts(seed in 0u64..500) {
            let v = random_volume([12, 9, 7], seed, 0.05);
            prop_assume!(v.foreground_count() > 0);
            let t = make_transform(&v).unwrap();
            for (p, _) in v.foreground_voxels() {
                let n = t.voxel_to_normalized(p);
                prop_assert!(n.iter().all(|c| c.abs() <= 1.0 + 1e-12));
                let back = t.to_voxel(n);
                for a in 0..3 {
                    let want = p[a] as f64;
                    prop_assert!((back[a] - want).abs() <= 1e-9 * want.max(1.0));
                    prop_assert_eq!(back[a].round() as usize, p[a]);
                }
            }
        }
    }
}
