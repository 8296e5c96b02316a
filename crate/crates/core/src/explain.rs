//! Saliency from two sources: attention maps of the three view encoders
//! broadcast back into the volume, and occlusion sensitivity, the rise in
//! set-level MAE when one cube of voxels is blanked out.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mae, spearman};
use crate::model::{AgePredictor, TriameseModel};
use crate::numerics::Scalar;
use crate::vit::{AttentionRecord, PatchGrid};
use crate::volume::io::{load_with_header, save_with_header};
use crate::volume::{AgeLaw, ViewAxis, Volume, VolumeHeader};

/// How a per-view map is read out of the attention matrices.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionExtraction {
    /// Class-token row of the last layer, averaged over heads.
    #[default]
    LastLayer,
    /// Product of the head-averaged `(A + I) / 2` over all layers.
    Rollout,
}

/// How the three broadcast view maps are merged voxelwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewCombine {
    #[default]
    Mean,
    Product,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyKind {
    Attention,
    Occlusion,
}

impl SaliencyKind {
    pub fn name(self) -> &'static str {
        match self {
            SaliencyKind::Attention => "attention",
            SaliencyKind::Occlusion => "occlusion",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    Minmax,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::Raw => "raw",
            Normalization::Minmax => "minmax",
        }
    }
}

/// A 2D map over a view's patch grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMap {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl PatchMap {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Head-averaged attention of one layer, `tokens × tokens`.
fn head_average(records: &[&AttentionRecord], tokens: usize) -> Vec<f64> {
    let mut avg = vec![0.0; tokens * tokens];
    for rec in records {
        for (a, w) in avg.iter_mut().zip(&rec.weights) {
            *a += w;
        }
    }
    let heads = records.len() as f64;
    avg.iter_mut().for_each(|a| *a /= heads);
    avg
}

/// Per-view attention map from the records of one forward pass.
pub fn view_attention_map(
    records: &[AttentionRecord],
    grid: PatchGrid,
    extraction: AttentionExtraction,
) -> Result<PatchMap> {
    if records.is_empty() {
        return Err(Error::Contract("no attention records to build a map from".into()));
    }
    let tokens = grid.num_tokens();
    if let Some(bad) = records.iter().find(|r| r.tokens != tokens || r.weights.len() != tokens * tokens) {
        return Err(Error::dim("view_attention_map", &[tokens], &[bad.tokens]));
    }
    let layers = records.iter().map(|r| r.layer).max().expect("nonempty") + 1;
    let per_layer: Vec<Vec<&AttentionRecord>> = (0..layers)
        .map(|l| records.iter().filter(|r| r.layer == l).collect())
        .collect();
    if per_layer.iter().any(|heads| heads.is_empty()) {
        return Err(Error::Contract("attention records skip a layer".into()));
    }

    let class_row = match extraction {
        AttentionExtraction::LastLayer => {
            let avg = head_average(&per_layer[layers - 1], tokens);
            avg[..tokens].to_vec()
        }
        AttentionExtraction::Rollout => {
            let mut joint: Option<Vec<f64>> = None;
            for heads in &per_layer {
                let mut a = head_average(heads, tokens);
                for r in 0..tokens {
                    for c in 0..tokens {
                        let eye = if r == c { 1.0 } else { 0.0 };
                        a[r * tokens + c] = (a[r * tokens + c] + eye) / 2.0;
                    }
                }
                joint = Some(match joint {
                    None => a,
                    Some(prev) => matmul_square(&a, &prev, tokens),
                });
            }
            joint.expect("at least one layer")[..tokens].to_vec()
        }
    };
    Ok(PatchMap {
        rows: grid.rows,
        cols: grid.cols,
        data: class_row[1..].to_vec(),
    })
}

fn matmul_square(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// A voxel-aligned importance map.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyGrid {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
    pub kind: SaliencyKind,
    pub normalization: Normalization,
    /// Edge of the cubes on which the map is piecewise constant.
    pub block: usize,
}

impl SaliencyGrid {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    /// Rescaled to `[0, 1]`; a constant grid maps to all zeros.
    pub fn minmax(&self) -> SaliencyGrid {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let data = self
            .data
            .iter()
            .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
            .collect();
        SaliencyGrid {
            data,
            normalization: Normalization::Minmax,
            ..self.clone()
        }
    }

    /// Voxel index of the largest value, first in raster order on ties.
    pub fn argmax(&self) -> [usize; 3] {
        let mut best = 0;
        for (at, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = at;
            }
        }
        let [_, w, c] = self.dims;
        [best / (w * c), (best / c) % w, best % c]
    }

    /// Block means over `block`-sized cubes, partial at the far edges.
    pub fn pooled(&self, block: usize) -> Vec<f64> {
        let block = block.max(1);
        let cells = self.dims.map(|d| d.div_ceil(block));
        let mut sums = vec![0.0; cells.iter().product()];
        let mut counts = vec![0usize; sums.len()];
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    let cell = ((i / block) * cells[1] + j / block) * cells[2] + k / block;
                    sums[cell] += self.get(i, j, k);
                    counts[cell] += 1;
                }
            }
        }
        sums.iter().zip(&counts).map(|(s, &n)| s / n as f64).collect()
    }

    fn to_volume(&self) -> Result<Volume> {
        Volume::new(self.dims, self.data.iter().map(|&v| v as f32).collect())
    }

    /// Writes the grid in the volume file format, tagging kind, normalization
    /// and block size in the header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let volume = self.to_volume()?;
        let header = VolumeHeader {
            kind: Some(self.kind.name().into()),
            normalization: Some(self.normalization.name().into()),
            block: Some(self.block),
            ..VolumeHeader::for_volume(&volume)
        };
        save_with_header(&volume, &header, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (volume, header) = load_with_header(path)?;
        let kind = match header.kind.as_deref() {
            Some("attention") => SaliencyKind::Attention,
            Some("occlusion") => SaliencyKind::Occlusion,
            other => return Err(Error::load(path, format!("not a saliency grid (kind {other:?})"))),
        };
        let normalization = match header.normalization.as_deref() {
            Some("minmax") => Normalization::Minmax,
            Some("raw") | None => Normalization::Raw,
            Some(other) => return Err(Error::load(path, format!("unknown normalization `{other}`"))),
        };
        Ok(Self {
            dims: header.dims,
            data: volume.data().iter().map(|&v| f64::from(v)).collect(),
            kind,
            normalization,
            block: header.block.unwrap_or(1),
        })
    }

    /// One binary PGM per slice along the last axis, each scaled by the
    /// grid-wide range so slices are comparable.
    pub fn write_pgm_slices(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let scaled = self.minmax();
        let [h, w, c] = self.dims;
        for k in 0..c {
            let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
            for i in 0..h {
                for j in 0..w {
                    bytes.push((scaled.get(i, j, k) * 255.0).round() as u8);
                }
            }
            let path = dir.join(format!("{stem}_{k:03}.pgm"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// `i,j,k,value` rows for external plotting.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("i,j,k,value\n");
        let [h, w, c] = self.dims;
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    writeln!(out, "{i},{j},{k},{}", self.get(i, j, k)).expect("write to string");
                }
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Broadcasts each view map along its channel axis, maps it back to the
/// volume frame and merges the three. Output is minmax-normalized.
pub fn synthesize_3d_attention(
    maps: [&PatchMap; 3],
    dims: [usize; 3],
    patch_size: usize,
    combine: ViewCombine,
) -> Result<SaliencyGrid> {
    Ok(combine_view_maps(maps, dims, patch_size, combine)?.minmax())
}

/// [`synthesize_3d_attention`] before normalization.
pub fn combine_view_maps(
    maps: [&PatchMap; 3],
    dims: [usize; 3],
    patch_size: usize,
    combine: ViewCombine,
) -> Result<SaliencyGrid> {
    for (axis, map) in ViewAxis::ALL.iter().zip(maps) {
        let grid = PatchGrid::new(axis.view_dims(dims), patch_size);
        if (map.rows, map.cols) != (grid.rows, grid.cols) || map.data.len() != map.rows * map.cols {
            return Err(Error::Contract(format!(
                "view {} map is {}×{}, expected {}×{} for dims {dims:?}",
                axis.name(),
                map.rows,
                map.cols,
                grid.rows,
                grid.cols
            )));
        }
    }
    let axes = ViewAxis::ALL.map(|a| a.axes());
    let mut data = Vec::with_capacity(dims.iter().product());
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i, j, k];
                let vals = (0..3).map(|v| {
                    let [row_axis, col_axis, _] = axes[v];
                    maps[v].get(p[row_axis] / patch_size, p[col_axis] / patch_size)
                });
                data.push(match combine {
                    ViewCombine::Mean => vals.sum::<f64>() / 3.0,
                    ViewCombine::Product => vals.product(),
                });
            }
        }
    }
    Ok(SaliencyGrid {
        dims,
        data,
        kind: SaliencyKind::Attention,
        normalization: Normalization::Raw,
        block: patch_size,
    })
}

/// Raw attention saliency of `model` on one volume.
pub fn attention_saliency<T: Scalar>(
    model: &TriameseModel<T>,
    volume: &Volume,
    extraction: AttentionExtraction,
    combine: ViewCombine,
) -> Result<SaliencyGrid> {
    let (_, records) = model.predict_with_attention(volume)?;
    let grids = model.config.grids();
    let maps = [0, 1, 2].map(|v| view_attention_map(&records[v], grids[v], extraction));
    let [x, y, z] = maps;
    let (x, y, z) = (x?, y?, z?);
    combine_view_maps([&x, &y, &z], volume.dims(), model.config.vit.patch_size, combine)
}

/// Voxelwise mean of grids with equal dims, e.g. saliency over a set.
pub fn mean_grid(grids: &[SaliencyGrid]) -> Result<SaliencyGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::Contract("cannot average an empty set of grids".into()))?;
    let mut data = vec![0.0; first.data.len()];
    for g in grids {
        if g.dims != first.dims {
            return Err(Error::dim("mean_grid", &first.dims, &g.dims));
        }
        for (d, v) in data.iter_mut().zip(&g.data) {
            *d += v;
        }
    }
    data.iter_mut().for_each(|d| *d /= grids.len() as f64);
    Ok(SaliencyGrid {
        data,
        normalization: Normalization::Raw,
        ..first.clone()
    })
}

/// Whether the cube at `start` with edge `cube` overlaps the box
/// `[offset, offset + size)`.
pub fn cube_intersects(start: [usize; 3], cube: usize, offset: [usize; 3], size: [usize; 3]) -> bool {
    (0..3).all(|a| start[a] < offset[a] + size[a] && offset[a] < start[a] + cube)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcclusionConfig {
    pub cube_size: usize,
    pub fill_value: f32,
    /// Must equal `cube_size`: cubes tile the volume without overlap.
    pub stride: usize,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            cube_size: 7,
            fill_value: 0.0,
            stride: 7,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.cube_size == 0 || self.stride == 0 {
            return Err(Error::Config("occlusion cube_size and stride must be >= 1".into()));
        }
        if self.stride != self.cube_size {
            return Err(Error::Config(format!(
                "occlusion stride {} must equal cube_size {} so cubes do not overlap",
                self.stride, self.cube_size
            )));
        }
        if !self.fill_value.is_finite() {
            return Err(Error::Config("occlusion fill_value must be finite".into()));
        }
        if dims.iter().any(|&d| self.cube_size > d) {
            return Err(Error::Config(format!(
                "occlusion cube {} is larger than the volume {dims:?}",
                self.cube_size
            )));
        }
        Ok(())
    }
}

/// Start corners of the non-overlapping cubes, raster order. Cubes at the
/// far edges are clipped.
pub fn occlusion_positions(dims: [usize; 3], cube: usize) -> Vec<[usize; 3]> {
    let cube = cube.max(1);
    let mut out = Vec::new();
    for i in (0..dims[0]).step_by(cube) {
        for j in (0..dims[1]).step_by(cube) {
            for k in (0..dims[2]).step_by(cube) {
                out.push([i, j, k]);
            }
        }
    }
    out
}

fn occlude(volume: &Volume, start: [usize; 3], cube: usize, fill: f32) -> Volume {
    let mut out = volume.clone();
    let dims = volume.dims();
    for i in start[0]..(start[0] + cube).min(dims[0]) {
        for j in start[1]..(start[1] + cube).min(dims[1]) {
            for k in start[2]..(start[2] + cube).min(dims[2]) {
                out.set(i, j, k, fill);
            }
        }
    }
    out
}

/// Result of an occlusion sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Occlusion {
    pub baseline_mae: f64,
    pub positions: Vec<[usize; 3]>,
    /// `MAE_occluded − MAE_baseline` per position, signed.
    pub deltas: Vec<f64>,
    pub grid: SaliencyGrid,
}

impl Occlusion {
    /// Position with the largest ΔMAE, first on ties.
    pub fn top(&self) -> ([usize; 3], f64) {
        let mut best = 0;
        for (i, &d) in self.deltas.iter().enumerate() {
            if d > self.deltas[best] {
                best = i;
            }
        }
        (self.positions[best], self.deltas[best])
    }
}

/// Occludes each cube in every evaluation volume and records the change in
/// set-level MAE. Positions run in parallel unless `serial`.
pub fn occlusion_sweep<M: AgePredictor>(
    model: &M,
    volumes: &[Volume],
    ages: &[f64],
    cfg: &OcclusionConfig,
    serial: bool,
) -> Result<Occlusion> {
    if volumes.is_empty() {
        return Err(Error::Contract("occlusion needs a nonempty evaluation set".into()));
    }
    if volumes.len() != ages.len() {
        return Err(Error::dim("occlusion_sweep", &[volumes.len()], &[ages.len()]));
    }
    let dims = volumes[0].dims();
    if let Some(v) = volumes.iter().find(|v| v.dims() != dims) {
        return Err(Error::dim("occlusion_sweep", &dims, &v.dims()));
    }
    cfg.validate(dims)?;
    // fill values are relative to the model's input, not the raw intensities
    let volumes = volumes.iter().map(|v| model.input_space(v)).collect::<Result<Vec<_>>>()?;

    let set_mae = |vols: &mut dyn Iterator<Item = Volume>| -> Result<f64> {
        let preds = vols.map(|v| model.predict_age(&v)).collect::<Result<Vec<_>>>()?;
        mae(&preds, ages)
    };
    let baseline_mae = set_mae(&mut volumes.iter().cloned())?;
    let positions = occlusion_positions(dims, cfg.cube_size);
    let delta = |start: &[usize; 3]| -> Result<f64> {
        let mut occluded = volumes.iter().map(|v| occlude(v, *start, cfg.cube_size, cfg.fill_value));
        Ok(set_mae(&mut occluded)? - baseline_mae)
    };
    let deltas = if serial {
        positions.iter().map(delta).collect::<Result<Vec<_>>>()?
    } else {
        positions.par_iter().map(delta).collect::<Result<Vec<_>>>()?
    };

    let cube = cfg.cube_size;
    let cells = dims.map(|d| d.div_ceil(cube));
    let mut data = Vec::with_capacity(dims.iter().product());
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                data.push(deltas[((i / cube) * cells[1] + j / cube) * cells[2] + k / cube]);
            }
        }
    }
    Ok(Occlusion {
        baseline_mae,
        positions,
        deltas,
        grid: SaliencyGrid {
            dims,
            data,
            kind: SaliencyKind::Occlusion,
            normalization: Normalization::Raw,
            block: cube,
        },
    })
}

/// Spearman correlation of two grids after pooling both to the coarser of
/// their block sizes.
pub fn compare_maps(a: &SaliencyGrid, b: &SaliencyGrid) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::dim("compare_maps", &a.dims, &b.dims));
    }
    let block = a.block.max(b.block).max(1);
    spearman(&a.pooled(block), &b.pooled(block))
}

/// Reads age straight off the mean of a fixed box. Stands in for a model
/// that has learned exactly where the signal lives.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionReader {
    pub start: [usize; 3],
    pub size: [usize; 3],
    pub law: AgeLaw,
}

impl AgePredictor for RegionReader {
    fn predict_age(&self, volume: &Volume) -> Result<f64> {
        Ok(self.law.age(volume.box_mean(self.start, self.size)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(layer: usize, head: usize, tokens: usize, f: impl Fn(usize, usize) -> f64) -> AttentionRecord {
        let weights = (0..tokens * tokens).map(|at| f(at / tokens, at % tokens)).collect();
        AttentionRecord {
            layer,
            head,
            tokens,
            weights,
        }
    }

    fn grid_2x2() -> PatchGrid {
        PatchGrid::new([4, 4, 3], 2)
    }

    #[test]
    fn uniform_attention_gives_flat_map() {
        let rec = record(0, 0, 5, |_, _| 0.2);
        let map = view_attention_map(&[rec], grid_2x2(), AttentionExtraction::LastLayer).unwrap();
        assert_eq!((map.rows, map.cols), (2, 2));
        assert!(map.data.iter().all(|&v| v == 0.2));
    }

    #[test]
    fn concentrated_attention_is_one_hot() {
        // class token attends only to patch 2 (token 3)
        let rec = record(0, 0, 5, |r, c| if r == 0 { (c == 3) as u8 as f64 } else { 0.2 });
        let map = view_attention_map(&[rec], grid_2x2(), AttentionExtraction::LastLayer).unwrap();
        assert_eq!(map.data, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn heads_are_averaged() {
        let a = record(0, 0, 5, |_, c| [0.1, 0.4, 0.2, 0.2, 0.1][c]);
        let b = record(0, 1, 5, |_, c| [0.3, 0.1, 0.1, 0.2, 0.3][c]);
        let map = view_attention_map(&[a, b], grid_2x2(), AttentionExtraction::LastLayer).unwrap();
        let expect = [0.25, 0.15, 0.2, 0.2];
        for (m, e) in map.data.iter().zip(expect) {
            assert!((m - e).abs() < 1e-15);
        }
    }

    #[test]
    fn only_last_layer_is_read_by_default() {
        let early = record(0, 0, 5, |_, c| (c == 1) as u8 as f64);
        let late = record(1, 0, 5, |_, c| (c == 4) as u8 as f64);
        let map = view_attention_map(&[early, late], grid_2x2(), AttentionExtraction::LastLayer).unwrap();
        assert_eq!(map.data, vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rollout_of_one_layer_is_half_residual() {
        let rec = record(0, 0, 5, |_, c| (c == 2) as u8 as f64);
        let map = view_attention_map(&[rec], grid_2x2(), AttentionExtraction::Rollout).unwrap();
        // class row of (A + I) / 2 is [0.5, 0, 0.5, 0, 0]
        assert_eq!(map.data, vec![0.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn empty_records_are_rejected() {
        let err = view_attention_map(&[], grid_2x2(), AttentionExtraction::LastLayer).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    fn flat(rows: usize, cols: usize, v: f64) -> PatchMap {
        PatchMap {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    #[test]
    fn flat_maps_give_flat_grid() {
        let dims = [4, 6, 2];
        let maps = ViewAxis::ALL.map(|a| {
            let g = PatchGrid::new(a.view_dims(dims), 2);
            flat(g.rows, g.cols, 0.3)
        });
        let s = synthesize_3d_attention([&maps[0], &maps[1], &maps[2]], dims, 2, ViewCombine::Mean).unwrap();
        assert!(s.data.iter().all(|&v| v == 0.0));
        assert_eq!(s.normalization, Normalization::Minmax);
    }

    #[test]
    fn mismatched_map_is_rejected() {
        let dims = [4, 4, 4];
        let m = flat(2, 2, 1.0);
        let bad = flat(3, 2, 1.0);
        let err = synthesize_3d_attention([&m, &bad, &m], dims, 2, ViewCombine::Mean).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn minmax_is_in_unit_interval() {
        let g = SaliencyGrid {
            dims: [1, 1, 3],
            data: vec![-2.0, 0.0, 6.0],
            kind: SaliencyKind::Occlusion,
            normalization: Normalization::Raw,
            block: 1,
        };
        assert_eq!(g.minmax().data, vec![0.0, 0.25, 1.0]);
    }

    #[test]
    fn production_occlusion_positions() {
        assert_eq!(occlusion_positions(crate::volume::PRODUCTION_DIMS, 7).len(), 2704);
    }

    #[test]
    fn oversized_cube_is_config_error() {
        let cfg = OcclusionConfig {
            cube_size: 9,
            stride: 9,
            ..OcclusionConfig::default()
        };
        assert!(cfg.validate([8, 10, 10]).unwrap_err().is_config());
    }

    #[test]
    fn compare_self_and_negation() {
        let g = SaliencyGrid {
            dims: [2, 2, 2],
            data: vec![0.1, 0.5, 0.2, 0.9, 0.3, 0.7, 0.4, 0.8],
            kind: SaliencyKind::Attention,
            normalization: Normalization::Raw,
            block: 1,
        };
        let neg = SaliencyGrid {
            data: g.data.iter().map(|v| -v).collect(),
            ..g.clone()
        };
        assert_eq!(compare_maps(&g, &g).unwrap(), 1.0);
        assert_eq!(compare_maps(&g, &neg).unwrap(), -1.0);
    }
}
