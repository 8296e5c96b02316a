//! Volumetric data model: the scalar grid fed to the model and its three
//! axis-permuted views.

mod augment;
pub(crate) mod io;
mod manifest;
mod synth;

pub use augment::{augment, flip, rotate, translate, AugmentConfig};
pub use io::{load_volume, payload_path, save_volume, VolumeHeader};
pub use manifest::{DatasetManifest, ManifestRecord, Split, SplitFractions};
pub use synth::{generate_synthetic_dataset, AgeLaw, SynthConfig, SyntheticDataset};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Production voxel grid.
pub const PRODUCTION_DIMS: [usize; 3] = [91, 109, 91];

/// Dense `H × W × C` grid, row-major with `C` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    voxel_mm: f64,
    data: Vec<f32>,
    mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Contract(format!("volume dims must be >= 1, got {dims:?}")));
        }
        let numel = dims.iter().product::<usize>();
        if data.len() != numel {
            return Err(Error::dim("volume", &dims, &[data.len()]));
        }
        Ok(Self {
            dims,
            voxel_mm: 2.0,
            data,
            mask: None,
        })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![0.0; dims.iter().product()]).expect("positive dims")
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, data).expect("positive dims")
    }

    pub fn with_voxel_mm(mut self, voxel_mm: f64) -> Self {
        self.voxel_mm = voxel_mm;
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::dim("volume mask", &self.dims, &[mask.len()]));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_mm(&self) -> f64 {
        self.voxel_mm
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let at = self.index(i, j, k);
        self.data[at] = v;
    }

    fn in_mask(&self, at: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[at])
    }

    /// Mean of the voxels in the axis-aligned box `[start, start + size)`.
    pub fn box_mean(&self, start: [usize; 3], size: [usize; 3]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for i in start[0]..(start[0] + size[0]).min(self.dims[0]) {
            for j in start[1]..(start[1] + size[1]).min(self.dims[1]) {
                for k in start[2]..(start[2] + size[2]).min(self.dims[2]) {
                    total += f64::from(self.get(i, j, k));
                    count += 1;
                }
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

/// Standardizes in-mask voxels to zero mean and unit variance; out-of-mask
/// voxels become 0. Without a mask the whole grid is used.
pub fn normalize(volume: &Volume) -> Result<Volume> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (at, &v) in volume.data.iter().enumerate() {
        if volume.in_mask(at) {
            sum += f64::from(v);
            count += 1;
        }
    }
    if count < 2 {
        return Err(Error::Degenerate(format!(
            "normalization needs at least 2 in-mask voxels, found {count}"
        )));
    }
    let mean = sum / count as f64;
    let var = volume
        .data
        .iter()
        .enumerate()
        .filter(|(at, _)| volume.in_mask(*at))
        .map(|(_, &v)| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    if var <= f64::EPSILON * mean.abs().max(1.0) {
        return Err(Error::Degenerate(
            "in-mask intensities have zero variance".into(),
        ));
    }
    let std = var.sqrt();
    let data = volume
        .data
        .iter()
        .enumerate()
        .map(|(at, &v)| {
            if volume.in_mask(at) {
                ((f64::from(v) - mean) / std) as f32
            } else {
                0.0
            }
        })
        .collect();
    Ok(Volume {
        data,
        ..volume.clone()
    })
}

/// Which axis permutation a view represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewAxis {
    X,
    Y,
    Z,
}

impl ViewAxis {
    pub const ALL: [ViewAxis; 3] = [ViewAxis::X, ViewAxis::Y, ViewAxis::Z];

    /// Volume axes read as (height, width, channels): X is `H×W×C`,
    /// Y is `H×C×W`, Z is `W×H×C`.
    pub fn axes(self) -> [usize; 3] {
        match self {
            ViewAxis::X => [0, 1, 2],
            ViewAxis::Y => [0, 2, 1],
            ViewAxis::Z => [1, 0, 2],
        }
    }

    /// (height, width, channels) of this view of a volume with `dims`.
    pub fn view_dims(self, dims: [usize; 3]) -> [usize; 3] {
        self.axes().map(|a| dims[a])
    }

    pub fn position(self) -> usize {
        match self {
            ViewAxis::X => 0,
            ViewAxis::Y => 1,
            ViewAxis::Z => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ViewAxis::X => "x",
            ViewAxis::Y => "y",
            ViewAxis::Z => "z",
        }
    }
}

/// A volume re-read as a 2D image with channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTensor {
    pub axis: ViewAxis,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ViewTensor {
    pub fn of(volume: &Volume, axis: ViewAxis) -> Self {
        let [h, w, c] = axis.view_dims(volume.dims);
        let perm = axis.axes();
        let mut data = Vec::with_capacity(volume.len());
        let mut src = [0usize; 3];
        for a in 0..h {
            for b in 0..w {
                for ch in 0..c {
                    src[perm[0]] = a;
                    src[perm[1]] = b;
                    src[perm[2]] = ch;
                    data.push(volume.get(src[0], src[1], src[2]));
                }
            }
        }
        Self {
            axis,
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Undoes the permutation, recovering the source grid.
    pub fn to_volume(&self) -> Volume {
        let perm = self.axis.axes();
        let mut dims = [0; 3];
        for (view_axis, &vol_axis) in perm.iter().enumerate() {
            dims[vol_axis] = self.dims()[view_axis];
        }
        let mut out = Volume::zeros(dims);
        let mut dst = [0usize; 3];
        for a in 0..self.height {
            for b in 0..self.width {
                for ch in 0..self.channels {
                    dst[perm[0]] = a;
                    dst[perm[1]] = b;
                    dst[perm[2]] = ch;
                    out.set(dst[0], dst[1], dst[2], self.get(a, b, ch));
                }
            }
        }
        out
    }
}

/// The X, Y and Z views of `volume`.
pub fn reslice(volume: &Volume) -> [ViewTensor; 3] {
    ViewAxis::ALL.map(|axis| ViewTensor::of(volume, axis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn production_view_dims() {
        let dims = ViewAxis::ALL.map(|a| a.view_dims(PRODUCTION_DIMS));
        assert_eq!(dims, [[91, 109, 91], [91, 91, 109], [109, 91, 91]]);
    }

    #[test]
    fn voxel_lands_at_permuted_index() {
        let vol = Volume::from_fn([2, 3, 4], |i, j, k| (100 * i + 10 * j + k) as f32);
        let [x, y, z] = reslice(&vol);
        let (i, j, k) = (1, 2, 3);
        let v = vol.get(i, j, k);
        assert_eq!(x.get(i, j, k), v);
        assert_eq!(y.get(i, k, j), v);
        assert_eq!(z.get(j, i, k), v);
    }

    #[test]
    fn one_hot_volume_gives_one_hot_views() {
        let dims = [3, 4, 5];
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let mut vol = Volume::zeros(dims);
                    vol.set(i, j, k, 1.0);
                    for view in reslice(&vol) {
                        assert_eq!(view.data.iter().filter(|&&v| v != 0.0).count(), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn normalize_two_point() {
        let vol = Volume::new([2, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(normalize(&vol).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn normalize_respects_mask() {
        let vol = Volume::new([4, 1, 1], vec![1.0, 3.0, 50.0, -7.0])
            .unwrap()
            .with_mask(vec![true, true, false, false])
            .unwrap();
        assert_eq!(normalize(&vol).unwrap().data(), &[-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_constant_region_fails() {
        let vol = Volume::new([2, 2, 1], vec![5.0; 4]).unwrap();
        assert!(matches!(normalize(&vol), Err(Error::Degenerate(_))));
        let single = Volume::new([1, 1, 1], vec![5.0]).unwrap();
        assert!(normalize(&single).is_err());
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(h, w, c)| {
            prop::collection::vec(-100.0f32..100.0, h * w * c)
                .prop_map(move |data| Volume::new([h, w, c], data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn reslice_round_trips(vol in arb_volume()) {
            for view in reslice(&vol) {
                prop_assert_eq!(&view.to_volume(), &vol);
            }
        }

        #[test]
        fn normalize_is_idempotent(vol in arb_volume()) {
            if let Ok(once) = normalize(&vol) {
                let stats = |v: &Volume| {
                    let n = v.len() as f64;
                    let mean = v.data().iter().map(|&x| f64::from(x)).sum::<f64>() / n;
                    let var = v.data().iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / n;
                    (mean, var.sqrt())
                };
                let (mean, std) = stats(&once);
                prop_assert!(mean.abs() < 1e-5);
                prop_assert!((std - 1.0).abs() < 1e-4);
                let twice = normalize(&once).unwrap();
                for (a, b) in once.data().iter().zip(twice.data()) {
                    prop_assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()));
                }
            }
        }
    }
}
