mod common;

use proptest::prelude::*;
use triamese::explain::*;
use triamese::model::AgePredictor;
use triamese::vit::PatchGrid;
use triamese::volume::{generate_synthetic_dataset, Split, SynthConfig, ViewAxis, Volume};
use triamese::Result;

struct Constant(f64);

impl AgePredictor for Constant {
    fn predict_age(&self, _: &Volume) -> Result<f64> {
        Ok(self.0)
    }
}

fn maps_for(dims: [usize; 3], p: usize, f: impl Fn(ViewAxis, usize, usize) -> f64) -> [PatchMap; 3] {
    ViewAxis::ALL.map(|axis| {
        let g = PatchGrid::new(axis.view_dims(dims), p);
        let data = (0..g.rows * g.cols).map(|at| f(axis, at / g.cols, at % g.cols)).collect();
        PatchMap {
            rows: g.rows,
            cols: g.cols,
            data,
        }
    })
}

#[test]
fn one_hot_patch_lands_at_inverse_permuted_block() {
    let dims = [6, 8, 4];
    let p = 2;
    for view in ViewAxis::ALL {
        let (r, c) = (1, 1);
        let maps = maps_for(dims, p, |axis, rr, cc| (axis == view && rr == r && cc == c) as u8 as f64);
        let s = synthesize_3d_attention([&maps[0], &maps[1], &maps[2]], dims, p, ViewCombine::Mean).unwrap();
        let [row_axis, col_axis, _] = view.axes();
        // brute force over voxels: hot iff the voxel's in-plane coordinates fall in patch (r, c)
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let v = [i, j, k];
                    let hot = v[row_axis] / p == r && v[col_axis] / p == c;
                    assert_eq!(s.get(i, j, k), if hot { 1.0 } else { 0.0 }, "{view:?} at {v:?}");
                }
            }
        }
    }
}

#[test]
fn single_active_view_varies_only_in_its_plane() {
    let dims = [6, 8, 4];
    let maps = maps_for(dims, 2, |axis, r, c| if axis == ViewAxis::Y { (r * 7 + c * 3) as f64 } else { 0.5 });
    let s = synthesize_3d_attention([&maps[0], &maps[1], &maps[2]], dims, 2, ViewCombine::Mean).unwrap();
    // Y reads (axis 0, axis 2); axis 1 is its channel axis
    for i in 0..dims[0] {
        for k in 0..dims[2] {
            let first = s.get(i, 0, k);
            assert!((0..dims[1]).all(|j| s.get(i, j, k) == first));
        }
    }
}

#[test]
fn product_combination_multiplies_views() {
    let dims = [4, 4, 4];
    let maps = maps_for(dims, 2, |axis, r, c| match axis {
        ViewAxis::X => 1.0 + r as f64,
        ViewAxis::Y => 1.0 + c as f64,
        ViewAxis::Z => 2.0,
    });
    let raw = combine_view_maps([&maps[0], &maps[1], &maps[2]], dims, 2, ViewCombine::Product).unwrap();
    // X row = axis 0, Y col = axis 2
    assert_eq!(raw.get(3, 0, 3), 2.0 * 2.0 * 2.0);
    assert_eq!(raw.get(0, 3, 0), 2.0);
}

#[test]
fn constant_model_has_zero_occlusion_effect() {
    let ds = generate_synthetic_dataset(&SynthConfig {
        n: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let ages: Vec<f64> = ds.manifest.records.iter().map(|r| r.age).collect();
    let occ = occlusion_sweep(&Constant(50.0), &ds.volumes, &ages, &OcclusionConfig::default(), true).unwrap();
    assert_eq!(occ.positions.len(), 64);
    assert!(occ.grid.data.iter().all(|&d| d == 0.0));
}

#[test]
fn filling_with_the_original_value_is_a_no_op() {
    let volume = Volume::from_fn([10, 10, 10], |_, _, _| 2.5);
    let reader = RegionReader {
        start: [2, 2, 2],
        size: [4, 4, 4],
        law: Default::default(),
    };
    let cfg = OcclusionConfig {
        cube_size: 4,
        stride: 4,
        fill_value: 2.5,
    };
    let occ = occlusion_sweep(&reader, &[volume], &[30.0], &cfg, false).unwrap();
    assert!(occ.deltas.iter().all(|&d| d == 0.0));
}

/// Sees volumes shifted down by 5 and reads a box mean there.
struct Shifted(RegionReader);

impl AgePredictor for Shifted {
    fn predict_age(&self, volume: &Volume) -> Result<f64> {
        self.0.predict_age(&self.input_space(volume)?)
    }

    fn input_space(&self, volume: &Volume) -> Result<Volume> {
        let [h, w, c] = volume.dims();
        Ok(Volume::from_fn([h, w, c], |i, j, k| volume.get(i, j, k) - 5.0))
    }
}

#[test]
fn cubes_are_filled_in_the_model_input_space() {
    // raw 5 is input-space 0, so a zero fill changes nothing the model sees
    let volume = Volume::from_fn([8, 8, 8], |_, _, _| 5.0);
    let model = Shifted(RegionReader {
        start: [0, 0, 0],
        size: [4, 4, 4],
        law: Default::default(),
    });
    let cfg = OcclusionConfig {
        cube_size: 4,
        stride: 4,
        fill_value: 0.0,
    };
    let occ = occlusion_sweep(&model, &[volume], &[30.0], &cfg, true).unwrap();
    assert!(occ.deltas.iter().all(|&d| d == 0.0), "{:?}", occ.deltas);
}

#[test]
fn region_reader_top_cube_hits_planted_region() {
    let synth = SynthConfig::default();
    let ds = generate_synthetic_dataset(&synth).unwrap();
    let (volumes, ages) = ds.split(Split::Test);
    let reader = RegionReader {
        start: synth.region_offset,
        size: synth.region_size,
        law: synth.age_law,
    };
    let cfg = OcclusionConfig::default();
    let occ = occlusion_sweep(&reader, &volumes, &ages, &cfg, false).unwrap();
    let (top, delta) = occ.top();
    assert!(cube_intersects(top, cfg.cube_size, synth.region_offset, synth.region_size), "{top:?}");
    assert!(delta > 0.0);
    let a = occ.grid.argmax();
    assert!((0..3).all(|ax| a[ax] >= synth.region_offset[ax] && a[ax] < synth.region_offset[ax] + synth.region_size[ax]));
}

#[test]
fn parallel_and_serial_sweeps_agree() {
    let synth = SynthConfig {
        n: 8,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic_dataset(&synth).unwrap();
    let ages: Vec<f64> = ds.manifest.records.iter().map(|r| r.age).collect();
    let reader = RegionReader {
        start: [5, 5, 5],
        size: [9, 9, 9],
        law: synth.age_law,
    };
    let cfg = OcclusionConfig::default();
    let a = occlusion_sweep(&reader, &ds.volumes, &ages, &cfg, true).unwrap();
    let b = occlusion_sweep(&reader, &ds.volumes, &ages, &cfg, false).unwrap();
    assert_eq!(a, b);
}

#[test]
fn saliency_grid_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = SaliencyGrid {
        dims: [3, 4, 2],
        data: (0..24).map(|v| v as f64 * 0.5).collect(),
        kind: SaliencyKind::Occlusion,
        normalization: Normalization::Raw,
        block: 7,
    };
    let path = dir.path().join("g.json");
    grid.save(&path).unwrap();
    assert_eq!(SaliencyGrid::load(&path).unwrap(), grid);
    grid.write_pgm_slices(dir.path().join("slices"), "g").unwrap();
    let pgm = std::fs::read(dir.path().join("slices/g_001.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 3\n255\n"));
    assert_eq!(pgm.len(), 11 + 12);
    grid.write_csv(dir.path().join("g.csv")).unwrap();
}

#[test]
fn model_attention_saliency_has_volume_dims() {
    let model = triamese::model::TriameseModel::<f32>::init(triamese::model::ModelConfig::desk(), 2).unwrap();
    let volume = common::random_volume([28, 28, 28], 3);
    for extraction in [AttentionExtraction::LastLayer, AttentionExtraction::Rollout] {
        let raw = attention_saliency(&model, &volume, extraction, ViewCombine::Mean).unwrap();
        assert_eq!(raw.dims, [28, 28, 28]);
        assert!(raw.data.iter().all(|&v| v >= 0.0));
        let s = raw.minmax();
        assert!(s.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

proptest! {
    #[test]
    fn cubes_tile_the_volume(d0 in 1usize..12, d1 in 1usize..12, d2 in 1usize..12, cube in 1usize..6) {
        let dims = [d0, d1, d2];
        let mut cover = vec![0u8; d0 * d1 * d2];
        let positions = occlusion_positions(dims, cube);
        let expected: usize = dims.iter().map(|d| d.div_ceil(cube)).product();
        prop_assert_eq!(positions.len(), expected);
        for s in positions {
            for i in s[0]..(s[0] + cube).min(d0) {
                for j in s[1]..(s[1] + cube).min(d1) {
                    for k in s[2]..(s[2] + cube).min(d2) {
                        cover[(i * d1 + j) * d2 + k] += 1;
                    }
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c == 1));
    }

    #[test]
    fn minmax_lies_in_unit_interval(data in prop::collection::vec(-1e3f64..1e3, 1..50)) {
        let g = SaliencyGrid {
            dims: [1, 1, data.len()],
            data,
            kind: SaliencyKind::Attention,
            normalization: Normalization::Raw,
            block: 1,
        };
        let m = g.minmax();
        prop_assert!(m.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn compare_maps_is_symmetric(data in prop::collection::vec(0f64..1.0, 8)) {
        let a = SaliencyGrid {
            dims: [2, 2, 2],
            data: data.clone(),
            kind: SaliencyKind::Attention,
            normalization: Normalization::Raw,
            block: 1,
        };
        let b = SaliencyGrid { data: data.iter().map(|v| v * v + 0.1 * v.sin()).collect(), ..a.clone() };
        match (compare_maps(&a, &b), compare_maps(&b, &a)) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false),
        }
    }
}
