mod common;

use common::{gaussian, random_grid, rng, toy_scene};
use rand::Rng;
use spot_core::decoder::{
    decode_labels, semantic_argmax, write_prediction_csv, ClassScaling, Decoder, DecoderConfig, DecoderError,
    LayerPrediction, RunMode, CLASS_EMBED,
};
use spot_core::denoise::{make_noised_queries, ClassEmbeddingTable, DnConfig};
use spot_core::matrix::Matrix;
use spot_core::tensor::{Tape, Tensor};
use spot_core::voxel::{ScenePyramid, SparseVoxelGrid};

fn cfg(layers: usize) -> DecoderConfig {
    DecoderConfig {
        channels: 8,
        heads: 2,
        layers,
        n_queries: 4,
        n_classes: 3,
        pyramid_levels: 2,
        rho: 0.25,
        ..Default::default()
    }
}

fn bits(m: &Matrix<f64>) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

/// Grid whose features are the standard basis, so each heatmap row is the
/// query's mask embedding.
fn basis_grid(c: usize) -> SparseVoxelGrid {
    let coords = (0..c as u32).map(|i| [i, 0, 0]).collect();
    let mut f = Matrix::zeros(c, c);
    for i in 0..c {
        f.set(i, i, 1.0);
    }
    SparseVoxelGrid::new([c as u32, 1, 1], coords, f).unwrap()
}

fn set_param(dec: &mut Decoder, name: &str, mut f: impl FnMut(usize) -> f64) {
    let id = dec.params.find(name).unwrap();
    for (i, v) in dec.params.get_mut(id).data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

#[test]
fn heatmap_is_embedding_dot_features() {
    let dec = Decoder::new(cfg(1), 1).unwrap();
    let mut r = rng(2);
    let q = gaussian(&mut r, 5, 8);
    let emb = dec.predict(&q, &basis_grid(8)).unwrap().mask_heatmaps;
    let grid = random_grid(&mut r, 30, 8);
    let heat = dec.predict(&q, &grid).unwrap().mask_heatmaps;
    for i in 0..5 {
        for v in 0..30 {
            let want: f64 = (0..8).map(|c| emb.get(i, c) * grid.features().get(v, c)).sum();
            assert!((heat.get(i, v) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn matching_unit_feature_attains_row_maximum() {
    let dec = Decoder::new(cfg(1), 3).unwrap();
    let mut r = rng(4);
    let q = gaussian(&mut r, 1, 8);
    let emb = dec.predict(&q, &basis_grid(8)).unwrap().mask_heatmaps;
    let norm = emb.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rows: Vec<([u32; 3], Vec<f64>)> = (0..20u32)
        .map(|i| {
            let v: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            ([i, 0, 0], v.iter().map(|x| x / n).collect())
        })
        .collect();
    rows[7].1 = emb.data().iter().map(|x| x / norm).collect();
    let grid = SparseVoxelGrid::from_unsorted([20, 1, 1], rows).unwrap();
    let heat = dec.predict(&q, &grid).unwrap().mask_heatmaps;
    let best = (0..20)
        .max_by(|&a, &b| heat.get(0, a).total_cmp(&heat.get(0, b)))
        .unwrap();
    assert_eq!(best, 7);
}

#[test]
fn zero_mask_embedding_gives_zero_heatmaps() {
    let mut dec = Decoder::new(cfg(1), 5).unwrap();
    set_param(&mut dec, "head.mask.1.w", |_| 0.0);
    set_param(&mut dec, "head.mask.1.b", |_| 0.0);
    let mut r = rng(6);
    let p = dec
        .predict(&gaussian(&mut r, 3, 8), &random_grid(&mut r, 10, 8))
        .unwrap();
    assert!(p.mask_heatmaps.data().iter().all(|&h| h == 0.0));
}

#[test]
fn inference_shape_and_determinism() {
    let (grid, _) = toy_scene(1, 8);
    for layers in [1, 3] {
        let dec = Decoder::new(cfg(layers), 7).unwrap();
        let pyr = ScenePyramid::build(&grid, 2);
        let a = dec.infer(&pyr).unwrap();
        assert_eq!(a.len(), layers + 1);
        for p in &a {
            assert_eq!(p.class_logits.rows(), 4);
            assert_eq!(p.mask_heatmaps.cols(), grid.nv());
            assert!(p.class_logits.all_finite());
        }
        let b = dec.infer(&pyr).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(bits(&x.class_logits), bits(&y.class_logits));
            assert_eq!(bits(&x.mask_heatmaps), bits(&y.mask_heatmaps));
        }
    }
}

#[test]
fn all_empty_guidance_falls_back() {
    let (grid, _) = toy_scene(2, 8);
    let mut dec = Decoder::new(cfg(2), 8).unwrap();
    set_param(&mut dec, "head.mask.1.w", |_| 0.0);
    set_param(&mut dec, "head.mask.1.b", |_| 0.0);
    let pyr = ScenePyramid::build(&grid, 2);
    let mut tape = Tape::no_grad();
    let bound = dec.params.bind(&mut tape);
    let out = dec
        .forward(&mut tape, &bound, &pyr, None, RunMode::inference())
        .unwrap();
    let first = &out.trace[0];
    assert!(first.guidance.iter().all(|g| g.iter().all(|&b| !b)));
    let nv0 = pyr.level(first.level).nv();
    let k = ((0.25 * nv0 as f64).ceil() as usize).clamp(1, nv0);
    assert!(first.supports.iter().flatten().all(|s| s.len() == k));
}

#[test]
fn noised_queries_are_training_only() {
    let (grid, gt) = toy_scene(3, 8);
    let dec = Decoder::new(cfg(1), 9).unwrap();
    let table = ClassEmbeddingTable {
        rows: dec.params.get(dec.params.find(CLASS_EMBED).unwrap()).to_matrix(),
    };
    let dn = make_noised_queries(&gt, &table, &DnConfig::default(), &mut rng(1)).unwrap();
    let pyr = ScenePyramid::build(&grid, 2);
    let mut tape = Tape::no_grad();
    let bound = dec.params.bind(&mut tape);
    assert!(matches!(
        dec.forward(&mut tape, &bound, &pyr, Some(&dn), RunMode::inference()),
        Err(DecoderError::NoisedAtInference)
    ));
    let mode = RunMode {
        train: true,
        step: 0,
        dropout_seed: 0,
    };
    let out = dec.forward(&mut tape, &bound, &pyr, Some(&dn), mode).unwrap();
    assert_eq!(out.n_noised, 6);
    assert_eq!(tape.value(out.preds[1].logits).rows(), 4 + 6);
    // noised rows are guided by their object's mask
    let lvl = out.trace[0].level;
    assert_eq!(out.trace[0].guidance[4], pyr.project_mask(lvl, &dn.targets.masks[0]));
}

#[test]
fn inference_ignores_denoising_parameters() {
    let (grid, _) = toy_scene(4, 8);
    let pyr = ScenePyramid::build(&grid, 2);
    let mut dec = Decoder::new(cfg(2), 10).unwrap();
    let a = dec.infer(&pyr).unwrap();
    let mut r = rng(11);
    set_param(&mut dec, CLASS_EMBED, |_| r.random_range(-50.0..50.0));
    let b = dec.infer(&pyr).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(bits(&x.class_logits), bits(&y.class_logits));
        assert_eq!(bits(&x.mask_heatmaps), bits(&y.mask_heatmaps));
    }
}

#[test]
fn self_attention_isolates_query_groups() {
    let (grid, _) = toy_scene(5, 8);
    let dec = Decoder::new(cfg(1), 12).unwrap();
    let mut r = rng(13);
    let x = gaussian(&mut r, 7, 8);
    let guidance: Vec<Vec<bool>> = (0..7).map(|_| common::random_mask(&mut r, grid.nv(), 0.5)).collect();
    let run = |x: &Matrix<f64>| {
        let mut tape = Tape::no_grad();
        let bound = dec.params.bind(&mut tape);
        let xv = tape.constant(Tensor::from_matrix(x));
        let (out, _) = dec
            .decoder_layer(&mut tape, &bound, 0, xv, 4, &grid, &guidance, RunMode::inference())
            .unwrap();
        tape.value(out).to_matrix()
    };
    let base = run(&x);
    let mut xm = x.clone();
    xm.row_mut(1).iter_mut().for_each(|v| *v += 0.7);
    let pert = run(&xm);
    for i in 4..7 {
        assert_eq!(
            base.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            pert.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    assert_ne!(base.row(0), pert.row(0));
    let mut xn = x.clone();
    xn.row_mut(5).iter_mut().for_each(|v| *v -= 0.4);
    let pert = run(&xn);
    for i in 0..4 {
        assert_eq!(base.row(i), pert.row(i));
    }
}

fn pred(logits: Vec<Vec<f64>>, heat: Vec<Vec<f64>>) -> LayerPrediction {
    let n = logits.len();
    LayerPrediction {
        class_logits: Matrix::from_rows(&logits),
        mask_heatmaps: Matrix::from_rows(&heat),
        n_match: n,
    }
}

#[test]
fn semantic_argmax_constructions() {
    let p = pred(vec![vec![-9.0, -9.0, 9.0]], vec![vec![5.0, 6.0, 7.0]]);
    assert_eq!(semantic_argmax(&p, ClassScaling::Softmax, 0.25), vec![2, 2, 2]);

    let p = pred(
        vec![vec![-9.0, 9.0, -9.0], vec![-9.0, -9.0, 9.0]],
        vec![vec![20.0, 20.0, -20.0, -20.0], vec![-20.0, -20.0, 20.0, -20.0]],
    );
    assert_eq!(semantic_argmax(&p, ClassScaling::Softmax, 0.25), vec![1, 1, 2, 0]);
}

/// Brute force over every (query, class) pair.
fn oracle_labels(p: &LayerPrediction, thr: f64) -> Vec<u32> {
    let nv = p.mask_heatmaps.cols();
    (0..nv)
        .map(|v| {
            let mut best = (f64::NEG_INFINITY, 0u32);
            for q in 0..p.n_match {
                let row = p.class_logits.row(q);
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                for c in 1..row.len() {
                    let s = row[c].exp() / z / (1.0 + (-p.mask_heatmaps.get(q, v)).exp());
                    if s > best.0 {
                        best = (s, c as u32);
                    }
                }
            }
            if best.0 < thr {
                0
            } else {
                best.1
            }
        })
        .collect()
}

#[test]
fn semantic_argmax_matches_enumeration() {
    let mut r = rng(14);
    for _ in 0..50 {
        let p = LayerPrediction {
            class_logits: gaussian(&mut r, 3, 4),
            mask_heatmaps: gaussian(&mut r, 3, 10),
            n_match: 3,
        };
        assert_eq!(
            semantic_argmax(&p, ClassScaling::Softmax, 0.25),
            oracle_labels(&p, 0.25)
        );
    }
}

#[test]
fn decode_labels_rescaling() {
    let mut r = rng(15);
    for _ in 0..30 {
        let class: Matrix<f64> = gaussian(&mut r, 3, 4).map(|v: f64| v.exp());
        let mask: Matrix<f64> = gaussian(&mut r, 3, 12).map(|v: f64| 1.0 / (1.0 + (-v).exp()));
        let base = decode_labels(&class, &mask, f64::NEG_INFINITY);
        let scaled = class.map(|v| v * 3.7);
        assert_eq!(decode_labels(&scaled, &mask, f64::NEG_INFINITY), base);

        // with a shared class-score row, a monotone map of mask scores
        // keeps the winner
        let shared = Matrix::from_rows(&vec![class.row(0).to_vec(); 3]);
        let base = decode_labels(&shared, &mask, f64::NEG_INFINITY);
        let warped = mask.map(|v| v.powf(3.0) + 0.1);
        assert_eq!(decode_labels(&shared, &warped, f64::NEG_INFINITY), base);
    }
}

#[test]
fn logits_scaling_switch() {
    let p = pred(vec![vec![0.0, 2.0, 1.0]], vec![vec![3.0]]);
    assert_eq!(semantic_argmax(&p, ClassScaling::Logits, 0.25), vec![1]);
    let p = pred(vec![vec![0.0, -2.0, -1.0]], vec![vec![3.0]]);
    assert_eq!(semantic_argmax(&p, ClassScaling::Logits, 0.25), vec![0]);
}

#[test]
fn prediction_csv_rows() {
    let grid = SparseVoxelGrid::from_unsorted([4, 4, 4], vec![([1, 2, 3], vec![0.0]), ([0, 0, 0], vec![1.0])]).unwrap();
    let mut buf = Vec::new();
    write_prediction_csv(&mut buf, &grid, &[2, 1]).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "x,y,z,label\n0,0,0,2\n1,2,3,1\n");
}
