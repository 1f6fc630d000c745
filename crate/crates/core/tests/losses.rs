mod common;

use std::cell::RefCell;

use common::{brute_force_assignment, gaussian, random_mask, rng, toy_scene};
use rand::Rng;
use spot_core::decoder::{Decoder, DecoderConfig, LayerPrediction, LayerTrace, RunMode};
use spot_core::denoise::{dn_assignment, make_noised_queries, ClassEmbeddingTable, DnConfig};
use spot_core::gradcheck;
use spot_core::losses::{
    class_nll, dice_loss, dn_loss_on_tape, hungarian_match, loss_dn, loss_match, mask_bce, match_cost,
    match_loss_on_tape, plan_layers, sample_points, write_loss_csv, LossRecord, LossWeights,
};
use spot_core::matrix::Matrix;
use spot_core::tensor::{Tape, Tensor};
use spot_core::voxel::{GtObject, SceneGroundTruth, ScenePyramid};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn naive_bce(x: f64, t: bool) -> f64 {
    let p = sig(x);
    if t {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[test]
fn dice_cases() {
    let mut r = rng(1);
    let mask = random_mask(&mut r, 40, 0.4);
    let sat: Vec<f64> = mask.iter().map(|&b| if b { 20.0 } else { -20.0 }).collect();
    assert!(dice_loss(&sat, &mask).unwrap() < 1e-6);
    assert!(dice_loss(&[-20.0; 10], &[false; 10]).unwrap() < 1e-6);
    for _ in 0..20 {
        let x: Vec<f64> = (0..30).map(|_| r.random_range(-3.0..3.0)).collect();
        let t = random_mask(&mut r, 30, 0.5);
        let p: Vec<f64> = x.iter().map(|&v| sig(v)).collect();
        let inter: f64 = p.iter().zip(&t).filter(|(_, &b)| b).map(|(v, _)| v).sum();
        let want = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + t.iter().filter(|&&b| b).count() as f64 + 1.0);
        assert!((dice_loss(&x, &t).unwrap() - want).abs() < 1e-12);
    }
    assert!(dice_loss(&[0.0], &[true, false]).is_err());
}

#[test]
fn bce_cases() {
    let all: Vec<usize> = (0..8).collect();
    let z = mask_bce(&[0.0; 8], &[true, false, true, true, false, false, true, false], &all).unwrap();
    assert!((z - std::f64::consts::LN_2).abs() < 1e-15);
    let t = [true, false, true];
    assert!(mask_bce(&[20.0, -20.0, 20.0], &t, &[0, 1, 2]).unwrap() < 1e-6);
    assert!(mask_bce(&[0.0], &[true], &[]).is_err());
    let mut r = rng(2);
    for _ in 0..20 {
        let x: Vec<f64> = (0..25).map(|_| r.random_range(-4.0..4.0)).collect();
        let t = random_mask(&mut r, 25, 0.5);
        let pts = sample_points(25, 10, &mut r);
        let want = pts.iter().map(|&i| naive_bce(x[i], t[i])).sum::<f64>() / 10.0;
        assert!((mask_bce(&x, &t, &pts).unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn sampling_is_seeded_and_distinct() {
    let a = sample_points(100, 30, &mut rng(4));
    assert_eq!(a, sample_points(100, 30, &mut rng(4)));
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(sample_points(10, 2048, &mut rng(4)), (0..10).collect::<Vec<_>>());
}

#[test]
fn hungarian_matches_exhaustive_oracle() {
    let mut r = rng(5);
    for i in 0..300 {
        let no = 1 + i % 6;
        let nq = no + r.random_range(0..3);
        let mut cost = gaussian(&mut r, nq, no);
        if i % 3 == 0 {
            // integer costs force many ties
            for v in cost.data_mut() {
                *v = (v.abs() * 2.0).floor();
            }
        }
        let a = hungarian_match(&cost).unwrap();
        assert_eq!(a.pairs.len(), no);
        let mut qs: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut os: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        qs.dedup();
        os.sort_unstable();
        os.dedup();
        assert_eq!((qs.len(), os.len()), (no, no));
        assert!((a.total_cost(&cost) - brute_force_assignment(&cost)).abs() < 1e-9);
        assert_eq!(a, hungarian_match(&cost).unwrap());
    }
}

#[test]
fn match_cost_composition_and_monotonicity() {
    let w = LossWeights::default();
    let mut r = rng(6);
    let mask = random_mask(&mut r, 20, 0.5);
    let pts: Vec<usize> = (0..20).collect();
    let good_heat: Vec<f64> = mask.iter().map(|&b| if b { 30.0 } else { -30.0 }).collect();
    let good_logits = [-40.0, 40.0, -40.0];
    assert!(match_cost(&good_logits, &good_heat, 1, &mask, &pts, &w).unwrap() < 1e-6);

    let worse_heat: Vec<f64> = good_heat.iter().map(|h| h * 0.05).collect();
    let worse_logits = [0.0, 0.5, 0.0];
    let a = match_cost(&good_logits, &good_heat, 1, &mask, &pts, &w).unwrap();
    let b = match_cost(&worse_logits, &worse_heat, 1, &mask, &pts, &w).unwrap();
    assert!(a < b);

    for _ in 0..10 {
        let logits: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let heat: Vec<f64> = (0..20).map(|_| r.random_range(-3.0..3.0)).collect();
        let pts = sample_points(20, 12, &mut r);
        let sub_h: Vec<f64> = pts.iter().map(|&i| heat[i]).collect();
        let sub_m: Vec<bool> = pts.iter().map(|&i| mask[i]).collect();
        let want = 2.0 * class_nll(&logits, 3)
            + 5.0 * mask_bce(&heat, &mask, &pts).unwrap()
            + 5.0 * dice_loss(&sub_h, &sub_m).unwrap();
        assert!((match_cost(&logits, &heat, 3, &mask, &pts, &w).unwrap() - want).abs() < 1e-12);
    }
}

fn gt_of(masks: &[(u32, Vec<bool>)]) -> SceneGroundTruth {
    let nv = masks[0].1.len();
    let mut labels = vec![0; nv];
    let objects = masks
        .iter()
        .map(|(c, m)| {
            let idx: Vec<u32> = (0..nv as u32).filter(|&i| m[i as usize]).collect();
            for &i in &idx {
                labels[i as usize] = *c;
            }
            GtObject {
                class_id: *c,
                mask: idx,
            }
        })
        .collect();
    SceneGroundTruth {
        n_classes: 4,
        labels,
        objects,
    }
}

fn random_pred(r: &mut rand_chacha::ChaCha8Rng, n: usize, ncls: usize, nv: usize, n_match: usize) -> LayerPrediction {
    LayerPrediction {
        class_logits: gaussian(r, n, ncls),
        mask_heatmaps: gaussian(r, n, nv),
        n_match,
    }
}

#[test]
fn zero_weights_give_zero_loss() {
    let mut r = rng(7);
    let gt = gt_of(&[
        (1, vec![true, false, true, false]),
        (2, vec![false, true, false, false]),
    ]);
    let preds = vec![random_pred(&mut r, 3, 4, 4, 3), random_pred(&mut r, 3, 4, 4, 3)];
    assert_eq!(loss_match(&preds, &gt, &LossWeights::zero(), &mut r).unwrap(), 0.0);
}

#[test]
fn single_query_equals_match_cost() {
    let mut r = rng(8);
    let nv = 12;
    let mask = random_mask(&mut r, nv, 0.5);
    let gt = gt_of(&[(2, mask.clone())]);
    let pred = random_pred(&mut r, 1, 4, nv, 1);
    let w = LossWeights::default();
    let loss = loss_match(std::slice::from_ref(&pred), &gt, &w, &mut rng(9)).unwrap();
    let pts = sample_points(nv, w.n_sample_points, &mut rng(9));
    let want = match_cost(pred.class_logits.row(0), pred.mask_heatmaps.row(0), 2, &mask, &pts, &w).unwrap();
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
}

#[test]
fn match_loss_is_permutation_invariant() {
    let mut r = rng(10);
    let nv = 16;
    let a = random_mask(&mut r, nv, 0.3);
    let b: Vec<bool> = a.iter().map(|&x| !x).collect();
    let gt = gt_of(&[(1, a.clone()), (3, b.clone())]);
    let gt_rev = gt_of(&[(3, b), (1, a)]);
    let preds: Vec<LayerPrediction> = (0..3).map(|_| random_pred(&mut r, 4, 4, nv, 4)).collect();
    let w = LossWeights {
        n_sample_points: 10,
        ..Default::default()
    };
    let l1 = loss_match(&preds, &gt, &w, &mut rng(11)).unwrap();
    let l2 = loss_match(&preds, &gt_rev, &w, &mut rng(11)).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    assert!(l1 > 0.0);
}

#[test]
fn saturated_dn_reconstruction_is_near_zero() {
    let nv = 6;
    let m0 = vec![true, true, false, false, false, false];
    let m1 = vec![false, false, false, true, true, false];
    let gt = gt_of(&[(1, m0.clone()), (2, m1.clone())]);
    let table = ClassEmbeddingTable {
        rows: Matrix::zeros(4, 2),
    };
    let cfg = DnConfig {
        groups: 2,
        ..Default::default()
    };
    let dn = make_noised_queries(&gt, &table, &cfg, &mut rng(1)).unwrap();
    // one match row followed by four perfect noised rows
    let mut logits = Matrix::zeros(5, 4);
    let mut heat = Matrix::zeros(5, nv);
    for i in 0..4 {
        let (c, m) = if i % 2 == 0 { (1, &m0) } else { (2, &m1) };
        for k in 0..4 {
            logits.set(1 + i, k, if k == c { 40.0 } else { -40.0 });
        }
        for v in 0..nv {
            heat.set(1 + i, v, if m[v] { 40.0 } else { -40.0 });
        }
    }
    let pred = LayerPrediction {
        class_logits: logits,
        mask_heatmaps: heat,
        n_match: 1,
    };
    let l = loss_dn(
        &[pred],
        &dn.targets,
        &dn_assignment(&dn.targets),
        &LossWeights::default(),
        &mut rng(2),
    )
    .unwrap();
    assert!((0.0..1e-5).contains(&l), "{l}");
}

#[test]
fn loss_csv_layout() {
    let mut buf = Vec::new();
    write_loss_csv(
        &mut buf,
        &[LossRecord {
            step: 3,
            l_match: 1.5,
            l_dn: 0.25,
        }],
    )
    .unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "step,l_match,l_dn,total\n3,1.5e0,2.5e-1,1.75e0\n"
    );
}

fn toy_decoder(dropout: f64) -> DecoderConfig {
    DecoderConfig {
        channels: 8,
        heads: 2,
        layers: 2,
        n_queries: 3,
        n_classes: 3,
        pyramid_levels: 2,
        rho: 0.3,
        dropout,
        ..Default::default()
    }
}

enum Which {
    Match,
    Dn,
}

/// Finite-difference check of a full loss with respect to every decoder
/// parameter. Points, assignment and noised queries are frozen at the base
/// point; a perturbation that changes any selection or guidance mask
/// triggers a retry with a smaller step.
fn full_loss_gradcheck(which: Which, dropout: f64) -> f64 {
    let (grid, gt) = toy_scene(3, 8);
    assert!(grid.nv() <= 64);
    let cfg = toy_decoder(dropout);
    let pyramid = ScenePyramid::build(&grid, cfg.pyramid_levels);
    let dec = Decoder::new(cfg, 21).unwrap();
    let w = LossWeights {
        n_sample_points: 24,
        ..Default::default()
    };
    let table = ClassEmbeddingTable {
        rows: dec.params.get(dec.params.find("dn.class_embed").unwrap()).to_matrix(),
    };
    let noised = make_noised_queries(&gt, &table, &DnConfig::default(), &mut rng(5)).unwrap();
    let mode = RunMode {
        train: true,
        step: 4,
        dropout_seed: 99,
    };
    let mut base = Tape::no_grad();
    let bound = dec.params.bind(&mut base);
    let out = dec.forward(&mut base, &bound, &pyramid, Some(&noised), mode).unwrap();
    let plans = plan_layers(&out.predictions(&base), &gt, &w, &mut rng(6)).unwrap();
    let points: Vec<Vec<usize>> = plans.iter().map(|p| p.points.clone()).collect();
    let base_trace = out.trace;
    let inputs: Vec<Tensor> = dec.params.ids().map(|id| dec.params.get(id).clone()).collect();

    for h in [1e-6, 1e-7, 1e-8] {
        let changed = RefCell::new(false);
        let f = |tape: &mut Tape, vars: &[spot_core::tensor::Var]| -> Result<_, Box<dyn std::error::Error>> {
            let out = dec.forward(tape, vars, &pyramid, Some(&noised), mode)?;
            if !same_trace(&out.trace, &base_trace) {
                *changed.borrow_mut() = true;
            }
            Ok(match which {
                Which::Match => match_loss_on_tape(tape, &out.preds, out.n_match, &gt, &plans, &w)?,
                Which::Dn => dn_loss_on_tape(
                    tape,
                    &out.preds,
                    out.n_match,
                    &noised.targets,
                    &dn_assignment(&noised.targets),
                    &points,
                    &w,
                )?,
            })
        };
        let report = gradcheck::check(&inputs, f, h, 1).unwrap();
        if !*changed.borrow() {
            let mut worst = 0.0f64;
            for (i, id) in dec.params.ids().enumerate() {
                if dec.params.name(id).ends_with(".self.k.b") {
                    // softmax is shift invariant per row, so this gradient
                    // is exactly zero and the difference quotient is noise
                    assert!(report.analytic_norms[i] < 1e-12);
                    assert!(report.numeric_norms[i] < 1e-6);
                } else {
                    worst = worst.max(report.rel_errors[i]);
                }
            }
            return worst;
        }
    }
    panic!("selection kept changing under perturbation");
}

fn same_trace(a: &[LayerTrace], b: &[LayerTrace]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.supports == y.supports && x.guidance == y.guidance)
}

#[test]
fn match_loss_gradients_through_whole_decoder() {
    let e = full_loss_gradcheck(Which::Match, 0.0);
    assert!(e < 1e-4, "max rel error {e}");
}

#[test]
fn dn_loss_gradients_through_whole_decoder() {
    let e = full_loss_gradcheck(Which::Dn, 0.0);
    assert!(e < 1e-4, "max rel error {e}");
}

#[test]
fn gradients_hold_with_dropout_masks_fixed() {
    let e = full_loss_gradcheck(Which::Match, 0.2);
    assert!(e < 1e-4, "max rel error {e}");
}
