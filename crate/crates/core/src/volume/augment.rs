use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

/// Spatial augmentation. One gate with `apply_probability` decides whether a
/// sample is augmented at all; inside the gate each transform is drawn
/// independently with probability one half.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub apply_probability: f64,
    pub max_translation_voxels: usize,
    /// Rotation angles are drawn from `[-rotation_range_deg, rotation_range_deg]`.
    pub rotation_range_deg: f64,
    pub flips_enabled: bool,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            apply_probability: 0.5,
            max_translation_voxels: 10,
            rotation_range_deg: 20.0,
            flips_enabled: true,
            rng_seed: 3407,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            apply_probability: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::Config(format!(
                "augment.apply_probability must lie in [0, 1], got {}",
                self.apply_probability
            )));
        }
        if !(self.rotation_range_deg >= 0.0 && self.rotation_range_deg.is_finite()) {
            return Err(Error::Config(format!(
                "augment.rotation_range_deg must be finite and >= 0, got {}",
                self.rotation_range_deg
            )));
        }
        Ok(())
    }
}

/// Randomly augments `volume`; output dims always match the input.
pub fn augment<R: Rng + ?Sized>(volume: &Volume, cfg: &AugmentConfig, rng: &mut R) -> Volume {
    if cfg.apply_probability <= 0.0 || rng.random::<f64>() >= cfg.apply_probability {
        return volume.clone();
    }
    let mut out = volume.clone();
    if cfg.max_translation_voxels > 0 && rng.random_bool(0.5) {
        let m = cfg.max_translation_voxels as i64;
        let shift = [(); 3].map(|_| rng.random_range(-m..=m));
        out = translate(&out, shift);
    }
    if cfg.rotation_range_deg > 0.0 && rng.random_bool(0.5) {
        let axis = rng.random_range(0..3);
        let r = cfg.rotation_range_deg;
        let angle = rng.random_range(-r..=r);
        out = rotate(&out, axis, angle);
    }
    if cfg.flips_enabled && rng.random_bool(0.5) {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                out = flip(&out, axis);
            }
        }
    }
    out
}

fn remap(volume: &Volume, source_of: impl Fn([usize; 3]) -> Option<[usize; 3]>) -> Volume {
    let dims = volume.dims();
    let data_of = |src: &dyn Fn(usize) -> f32| {
        let mut out = Vec::with_capacity(volume.len());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    out.push(match source_of([i, j, k]) {
                        Some([a, b, c]) => src(volume.index(a, b, c)),
                        None => 0.0,
                    });
                }
            }
        }
        out
    };
    let data = data_of(&|at| volume.data()[at]);
    let mask = volume.mask().map(|m| {
        data_of(&|at| if m[at] { 1.0 } else { 0.0 })
            .into_iter()
            .map(|v| v > 0.5)
            .collect()
    });
    rebuild(volume, data, mask)
}

fn rebuild(volume: &Volume, data: Vec<f32>, mask: Option<Vec<bool>>) -> Volume {
    let out = Volume::new(volume.dims(), data)
        .expect("dims preserved")
        .with_voxel_mm(volume.voxel_mm());
    match mask {
        Some(m) => out.with_mask(m).expect("mask length preserved"),
        None => out,
    }
}

/// Integer shift with zero fill: voxel `p` moves to `p + shift`.
pub fn translate(volume: &Volume, shift: [i64; 3]) -> Volume {
    let dims = volume.dims();
    remap(volume, |p| {
        let mut src = [0usize; 3];
        for a in 0..3 {
            let s = p[a] as i64 - shift[a];
            if s < 0 || s >= dims[a] as i64 {
                return None;
            }
            src[a] = s as usize;
        }
        Some(src)
    })
}

/// Mirrors the volume along `axis` (0, 1 or 2).
pub fn flip(volume: &Volume, axis: usize) -> Volume {
    let n = volume.dims()[axis];
    remap(volume, |mut p| {
        p[axis] = n - 1 - p[axis];
        Some(p)
    })
}

/// Rotates by `degrees` about `axis` through the grid center. Samples with
/// trilinear interpolation; points that map outside the grid become 0.
pub fn rotate(volume: &Volume, axis: usize, degrees: f64) -> Volume {
    let dims = volume.dims();
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (sin, cos) = degrees.to_radians().sin_cos();
    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let sample = |field: &dyn Fn(usize) -> f32| {
        let mut out = Vec::with_capacity(volume.len());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let p = [i as f64, j as f64, k as f64];
                    let mut q = p;
                    // inverse rotation maps output voxels back to the source
                    let du = p[u] - center[u];
                    let dv = p[v] - center[v];
                    q[u] = center[u] + cos * du + sin * dv;
                    q[v] = center[v] - sin * du + cos * dv;
                    out.push(trilinear(volume, q, field));
                }
            }
        }
        out
    };
    let data = sample(&|at| volume.data()[at]);
    let mask = volume.mask().map(|m| {
        sample(&|at| if m[at] { 1.0 } else { 0.0 })
            .into_iter()
            .map(|x| x > 0.5)
            .collect()
    });
    rebuild(volume, data, mask)
}

fn trilinear(volume: &Volume, q: [f64; 3], field: &dyn Fn(usize) -> f32) -> f32 {
    let dims = volume.dims();
    let base = q.map(|x| x.floor());
    let frac = [q[0] - base[0], q[1] - base[1], q[2] - base[2]];
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut weight = 1.0;
        let mut inside = true;
        for a in 0..3 {
            let bit = (corner >> a) & 1;
            let c = base[a] as i64 + bit as i64;
            weight *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            if c < 0 || c >= dims[a] as i64 {
                inside = false;
            } else {
                idx[a] = c as usize;
            }
        }
        if inside && weight > 0.0 {
            acc += weight * f64::from(field(volume.index(idx[0], idx[1], idx[2])));
        }
    }
    acc as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ramp(dims: [usize; 3]) -> Volume {
        Volume::from_fn(dims, |i, j, k| (i * 31 + j * 7 + k) as f32 * 0.25 - 3.0)
    }

    #[test]
    fn zero_probability_is_identity() {
        let vol = ramp([5, 6, 7]);
        let cfg = AugmentConfig::disabled();
        let mut rng = stream(1, &[]);
        for _ in 0..20 {
            assert_eq!(augment(&vol, &cfg, &mut rng), vol);
        }
    }

    #[test]
    fn flips_are_involutions() {
        let vol = ramp([4, 5, 6]);
        for axis in 0..3 {
            assert_ne!(flip(&vol, axis), vol);
            assert_eq!(flip(&flip(&vol, axis), axis), vol);
        }
    }

    #[test]
    fn impulse_moves_by_translation() {
        let mut vol = Volume::zeros([10, 6, 6]);
        vol.set(2, 3, 4, 1.0);
        let moved = translate(&vol, [3, 0, 0]);
        assert_eq!(moved.get(5, 3, 4), 1.0);
        assert_eq!(moved.data().iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn translation_inverts_when_nothing_falls_off() {
        let mut vol = Volume::zeros([9, 9, 9]);
        for i in 3..6 {
            vol.set(i, 4, 4, i as f32);
        }
        let there = translate(&vol, [2, -1, 3]);
        assert_eq!(translate(&there, [-2, 1, -3]), vol);
    }

    #[test]
    fn zero_rotation_is_identity_and_quarter_turn_is_exact() {
        let vol = ramp([5, 5, 5]);
        assert_eq!(rotate(&vol, 1, 0.0), vol);
        let quarter = rotate(&vol, 0, 90.0);
        let back = rotate(&quarter, 0, -90.0);
        for (a, b) in back.data().iter().zip(vol.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn augment_preserves_dims() {
        let vol = ramp([8, 9, 10]);
        let cfg = AugmentConfig {
            apply_probability: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = stream(7, &[]);
        for _ in 0..10 {
            assert_eq!(augment(&vol, &cfg, &mut rng).dims(), vol.dims());
        }
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = AugmentConfig {
            apply_probability: 1.5,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
