//! End-to-end acceptance gate: one PASS/FAIL line per check, non-zero exit
//! when any hard gate fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use corrbalance::class_graph::{
    center_loss, center_loss_grad, CenterMode, ClassGraph, NormalizationMode, DEFAULT_EPSILON,
};
use corrbalance::encoder::{EncoderConfig, EncoderStack, NodeSet};
use corrbalance::experiments::{
    mean, run_ablation, run_noise_drop, run_observation, run_sweep, sweep_label, ExperimentConfig, PCPL_LABEL,
};
use corrbalance::losses::{
    class_balanced_loss, drop_margins, drop_mask, focal_loss, pcpl_loss, plain_ce, reweight_pow_loss, LossConfig,
    LossVariant,
};
use corrbalance::metrics::{oracle_recall, recall_at_k, Protocol, ScenePrediction};
use corrbalance::model::{HeadConfig, TrainConfig, Trainer};
use corrbalance::numeric::{finite_diff_check, Affine, Matrix, Parameters};
use corrbalance::synthdata::{generate, separable_toy, Node, Relation, Scene};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
    /// Reported but never fails the run.
    advisory: bool,
}

impl Outcome {
    fn gate(passed: bool, detail: String) -> Self {
        Outcome {
            passed,
            detail,
            advisory: false,
        }
    }
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn within_budget(start: Instant, limit: Duration) -> (bool, String) {
    let t = start.elapsed();
    (t < limit, format!("{:.1}s of {}s", t.as_secs_f64(), limit.as_secs()))
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300) || a == b
}

// Brute-force graph recomputation, written without the library's helpers.
fn brute_graph(centers: &[Vec<f64>], mode: NormalizationMode, eps: f64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let c = centers.len();
    let mut e = vec![vec![0.0; c]; c];
    for k in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for t in 0..centers[k].len() {
                s += (centers[j][t] - centers[k][t]) * (centers[j][t] - centers[k][t]);
            }
            e[k][j] = s.sqrt();
        }
    }
    let u: Vec<f64> = e.iter().map(|row| row.iter().sum()).collect();
    let max = u.iter().cloned().fold(f64::MIN, f64::max);
    let min = u.iter().cloned().fold(f64::MAX, f64::min);
    let tau = match mode {
        NormalizationMode::MinMax if max > min => u.iter().map(|x| (x - min + eps) / (max - min)).collect(),
        NormalizationMode::Scaling if max > min && max > 0.0 => u.iter().map(|x| x / max).collect(),
        NormalizationMode::Softmax if max > min => {
            let z: f64 = u.iter().map(|x| (x - max).exp()).sum();
            u.iter().map(|x| (x - max).exp() / z).collect()
        }
        _ => vec![1.0; c],
    };
    (e, u, tau)
}

fn graph_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..200 {
        let c = rng.random_range(1..=16);
        let d = rng.random_range(1..=8);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let rows: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
            .collect();
        for mode in NormalizationMode::ALL {
            let mut g = ClassGraph::from_centers(Matrix::from_rows(&rows).unwrap(), mode, DEFAULT_EPSILON).unwrap();
            g.refresh_edges();
            let (e, u, tau) = brute_graph(&rows, mode, DEFAULT_EPSILON);
            let mut check = |a: f64, b: f64| {
                let r = (a - b).abs() / b.abs().max(1e-300);
                if a != b {
                    worst = worst.max(r);
                }
                ok &= rel_close(a, b, 1e-9);
            };
            for k in 0..c {
                for j in 0..c {
                    check(g.edges().get(k, j), e[k][j]);
                }
                check(g.global_correlation()[k], u[k]);
                check(g.tau()[k], tau[k]);
            }
        }
    }
    let (fast, t) = within_budget(start, Duration::from_secs(5));
    Outcome::gate(ok && fast, format!("200 center sets x 3 modes, worst rel {worst:.2e} (tol 1e-9), {t}"))
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Matrix {
    Matrix::randn(r, c, std, rng)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut failures = Vec::new();
    let mut worst_plain: f64 = 0.0;
    let mut worst_attn: f64 = 0.0;
    let mut record = |name: &str, report: corrbalance::numeric::GradCheckReport, attn: bool| {
        if attn {
            worst_attn = worst_attn.max(report.max_rel_error);
        } else {
            worst_plain = worst_plain.max(report.max_rel_error);
        }
        if !report.passed {
            failures.push(format!("{name} ({:.2e})", report.max_rel_error));
        }
    };

    for trial in 0..10 {
        let n = rng.random_range(1..=8);
        let c = rng.random_range(2..=8);
        let d = rng.random_range(1..=6);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();

        let f = random_matrix(&mut rng, n, d, 1.0);
        let centers = random_matrix(&mut rng, c, d, 1.0);
        let g = center_loss_grad(&f, &labels, &centers).unwrap();
        let r = finite_diff_check(
            |p| center_loss(&f, &labels, &Matrix::from_vec(c, d, p.to_vec()).unwrap()).unwrap(),
            centers.data(),
            g.centers.data(),
            1e-5,
            1e-6,
        )
        .unwrap();
        record("center_loss", r, false);

        let logits = random_matrix(&mut rng, n, c, 0.5);
        let tau: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
        let freqs: Vec<f64> = (0..c).map(|_| rng.random_range(1.0..500.0f64).round()).collect();
        let losses: Vec<(&str, Box<dyn Fn(&Matrix) -> corrbalance::losses::BatchLossResult>)> = vec![
            ("plain_ce", Box::new(|z: &Matrix| plain_ce(z, &labels).unwrap())),
            ("pcpl", Box::new(|z: &Matrix| pcpl_loss(z, &labels, &tau).unwrap())),
            ("reweight", Box::new(|z: &Matrix| reweight_pow_loss(z, &labels, &freqs, 0.7).unwrap())),
            ("class_balanced", Box::new(|z: &Matrix| class_balanced_loss(z, &labels, &freqs, 0.999).unwrap())),
            ("focal", Box::new(|z: &Matrix| focal_loss(z, &labels, 2.0).unwrap())),
        ];
        for (name, loss) in &losses {
            let analytic = loss(&logits).logit_gradient;
            let r = finite_diff_check(
                |p| loss(&Matrix::from_vec(n, c, p.to_vec()).unwrap()).loss,
                logits.data(),
                analytic.data(),
                1e-5,
                1e-6,
            )
            .unwrap();
            record(name, r, false);
        }

        let layer = Affine::init(d, c, 1.0, &mut rng);
        let x = random_matrix(&mut rng, n, d, 1.0);
        let dy = random_matrix(&mut rng, n, c, 1.0);
        let mut grads = Affine::zeros(d, c);
        let dx = layer.backward(&x, &dy, &mut grads).unwrap();
        let objective = |l: &Affine, x: &Matrix| -> f64 {
            l.forward(x).unwrap().data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let r = finite_diff_check(
            |p| {
                let mut l = layer.clone();
                l.assign_flat(p).unwrap();
                objective(&l, &x)
            },
            &layer.flatten(),
            &grads.flatten(),
            1e-5,
            1e-6,
        )
        .unwrap();
        record("affine params", r, false);
        let r = finite_diff_check(
            |p| objective(&layer, &Matrix::from_vec(n, d, p.to_vec()).unwrap()),
            x.data(),
            dx.data(),
            1e-5,
            1e-6,
        )
        .unwrap();
        record("affine input", r, false);

        let config = EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 4,
            ff_hidden_dim: 8,
            use_layer_norm: trial % 2 == 0,
        };
        let stack = EncoderStack::new(config, 4, 100 + trial).unwrap();
        let feats = random_matrix(&mut rng, 3, 4, 1.0);
        let boxes = Matrix::from_rows(&[
            vec![0.1, 0.1, 0.5, 0.4],
            vec![0.3, 0.2, 0.9, 0.8],
            vec![0.0, 0.5, 0.4, 1.0],
        ])
        .unwrap();
        let nodes = NodeSet::new(feats.clone(), boxes.clone()).unwrap();
        let upstream = random_matrix(&mut rng, 3, 4, 1.0);
        let (_, cache) = stack.forward_with_cache(&nodes).unwrap();
        let sg = stack.backward(&cache, &upstream).unwrap();
        let dot = |m: &Matrix| -> f64 { m.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum() };
        let r = finite_diff_check(
            |p| {
                let mut s = stack.clone();
                s.assign_flat(p).unwrap();
                dot(&s.forward(&nodes).unwrap())
            },
            &stack.flatten(),
            &sg.params.flatten(),
            1e-5,
            1e-4,
        )
        .unwrap();
        record("encoder params", r, true);
        let r = finite_diff_check(
            |p| {
                let ns = NodeSet::new(Matrix::from_vec(3, 4, p.to_vec()).unwrap(), boxes.clone()).unwrap();
                dot(&stack.forward(&ns).unwrap())
            },
            feats.data(),
            sg.features.data(),
            1e-5,
            1e-4,
        )
        .unwrap();
        record("encoder input", r, true);
    }
    let (fast, t) = within_budget(start, Duration::from_secs(60));
    let detail = format!(
        "worst rel {worst_plain:.2e} (tol 1e-6), encoder {worst_attn:.2e} (tol 1e-4), {t}{}",
        if failures.is_empty() { String::new() } else { format!(", failed: {}", failures.join(", ")) }
    );
    Outcome::gate(failures.is_empty() && fast, detail)
}

fn toy_trainer(seed: u64) -> Trainer {
    let config = TrainConfig {
        lr: 0.01,
        loss: LossConfig::new(LossVariant::pcpl()),
        encoder: Some(EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            ff_hidden_dim: 16,
            use_layer_norm: true,
        }),
        head: HeadConfig {
            hidden_dim: 16,
            feature_dim: 8,
        },
        seed,
        ..TrainConfig::default()
    };
    Trainer::new(config, 3, 16, &[1, 1, 1]).unwrap()
}

fn stop_gradient() -> Outcome {
    let ds = generate(&separable_toy(3)).unwrap();
    let batch: Vec<&Scene> = ds.scenes.iter().take(8).collect();
    let mut checks = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let f = random_matrix(&mut rng, 6, 4, 1.0);
    let labels = [0, 1, 2, 0, 1, 2];
    let centers = random_matrix(&mut rng, 3, 4, 1.0);
    let moved = f.map(|v| v + 0.3);
    let loss_changes = center_loss(&f, &labels, &centers).unwrap() != center_loss(&moved, &labels, &centers).unwrap();
    let zero_feature_grad = center_loss_grad(&moved, &labels, &centers)
        .unwrap()
        .features
        .data()
        .iter()
        .all(|&v| v == 0.0);
    checks.push(("center loss moves with f", loss_changes));
    checks.push(("center loss feature gradient is exactly 0", zero_feature_grad));

    let mut t = toy_trainer(5);
    let tau = vec![0.2, 1.0, 0.6];
    let (r1, g1) = t.gradients(&batch, &tau, None).unwrap();
    let shifted = t.graph().centers().map(|v| 2.0 * v + 1.5);
    t.graph_mut().set_centers(shifted).unwrap();
    t.graph_mut().refresh_edges();
    let (r2, g2) = t.gradients(&batch, &tau, None).unwrap();
    checks.push(("classification gradient ignores centers", g1 == g2 && r1 == r2));

    let fwd = t.model().forward_batch(&batch).unwrap();
    let zero = t.model().backward(&fwd, &Matrix::zeros(fwd.logits.rows(), 3)).unwrap();
    checks.push(("no center-loss path into parameters", zero.flatten().iter().all(|&v| v == 0.0)));

    let mut a = toy_trainer(6);
    let mut b = toy_trainer(6);
    let far = b.graph().centers().map(|v| v * 100.0 - 3.0);
    b.graph_mut().set_centers(far).unwrap();
    b.graph_mut().refresh_edges();
    a.train_step(&batch).unwrap();
    b.train_step(&batch).unwrap();
    checks.push(("warm-up step: model update independent of centers", a.model() == b.model()));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::gate(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} exact checks", checks.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    )
}

fn uniform_tau_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=32);
        let c = rng.random_range(2..=12);
        let logits = random_matrix(&mut rng, n, c, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let t = rng.random_range(0.1..3.0);
        let tau = vec![t; c];
        let distinct = {
            let mut l = labels.clone();
            l.sort_unstable();
            l.dedup();
            l.len()
        };
        let p = pcpl_loss(&logits, &labels, &tau).unwrap().loss;
        let ce = plain_ce(&logits, &labels).unwrap().loss * n as f64 / distinct as f64;
        worst = worst.max((p - ce).abs() / ce.abs().max(1.0));
    }
    Outcome::gate(worst <= 1e-12, format!("100 batches, worst deviation {worst:.2e} (tol 1e-12)"))
}

fn drop_algebra() -> Outcome {
    let mut checks = Vec::new();
    let centers = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![-1.0, 2.0]]).unwrap();
    let mut g = ClassGraph::from_centers(centers.clone(), NormalizationMode::MinMax, DEFAULT_EPSILON).unwrap();
    g.refresh_edges();
    let token = g.update_count();
    let own = drop_mask(&centers, &[0, 1, 2], &g, 2.0, token).unwrap();
    checks.push(("at own center kept", own == vec![false; 3]));
    let foreign = drop_mask(&centers, &[1, 2, 0], &g, 2.0, token).unwrap();
    checks.push(("at foreign center dropped", foreign == vec![true; 3]));

    let line = Matrix::from_rows(&[vec![0.0], vec![4.0]]).unwrap();
    let mut g1 = ClassGraph::from_centers(line, NormalizationMode::MinMax, DEFAULT_EPSILON).unwrap();
    g1.refresh_edges();
    let f = Matrix::from_rows(&[vec![3.0], vec![3.5]]).unwrap();
    let margins = drop_margins(&f, &[0, 0], &g1, 2.0, g1.update_count()).unwrap();
    let mask = drop_mask(&f, &[0, 0], &g1, 2.0, g1.update_count()).unwrap();
    checks.push(("boundary 3 kept at margin 0", margins[0] == 0.0 && !mask[0]));
    checks.push(("3.5 dropped at margin 1", margins[1] == 1.0 && mask[1]));

    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst: f64 = 0.0;
    let mut same_mask = true;
    for _ in 0..100 {
        let c = rng.random_range(2..=6);
        let d = rng.random_range(1..=5);
        let n = rng.random_range(1..=10);
        let centers = random_matrix(&mut rng, c, d, 2.0);
        let feats = random_matrix(&mut rng, n, d, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
        let moved = |m: &Matrix| {
            let mut out = m.clone();
            for r in 0..out.rows() {
                for (v, s) in out.row_mut(r).iter_mut().zip(&shift) {
                    *v += s;
                }
            }
            out
        };
        let mut ga = ClassGraph::from_centers(centers.clone(), NormalizationMode::MinMax, DEFAULT_EPSILON).unwrap();
        ga.refresh_edges();
        let mut gb = ClassGraph::from_centers(moved(&centers), NormalizationMode::MinMax, DEFAULT_EPSILON).unwrap();
        gb.refresh_edges();
        let a = drop_margins(&feats, &labels, &ga, 2.0, ga.update_count()).unwrap();
        let b = drop_margins(&moved(&feats), &labels, &gb, 2.0, gb.update_count()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs() / x.abs().max(1.0));
            // masks may only differ where the margin is within rounding of 0
            if (*x > 0.0) != (*y > 0.0) && x.abs() > 1e-9 {
                same_mask = false;
            }
        }
    }
    checks.push(("translation invariance", worst <= 1e-12 && same_mask));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::gate(
        failed.is_empty(),
        format!(
            "{} checks, translation worst {worst:.2e} (tol 1e-12){}",
            checks.len(),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join("; ")) }
        ),
    )
}

fn node_set_strategy() -> impl Strategy<Value = (usize, u64, Vec<usize>)> {
    (1usize..=6, any::<u64>()).prop_flat_map(|(n, seed)| {
        (Just(n), Just(seed), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
    })
}

fn permutation_equivariance() -> Outcome {
    let mut runner = TestRunner::new(ProptestConfig {
        cases: 100,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let stack = EncoderStack::new(
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            model_dim: 32,
            ff_hidden_dim: 64,
            use_layer_norm: true,
        },
        16,
        7,
    )
    .unwrap();
    let worst = std::cell::Cell::new(0.0f64);
    let result = runner.run(&node_set_strategy(), |(n, seed, perm)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feats = Matrix::randn(n, 16, 1.0, &mut rng);
        let boxes: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let x1 = rng.random_range(0.0..0.5);
                let y1 = rng.random_range(0.0..0.5);
                vec![x1, y1, x1 + rng.random_range(0.05..0.5), y1 + rng.random_range(0.05..0.5)]
            })
            .collect();
        let nodes = NodeSet::new(feats, Matrix::from_rows(&boxes).unwrap()).unwrap();
        let out = stack.forward(&nodes).unwrap();
        let out_perm = stack.forward(&nodes.permuted(&perm)).unwrap();
        let expected = out.select_rows(&perm);
        let dev = out_perm.max_abs_diff(&expected).unwrap();
        worst.set(worst.get().max(dev));
        prop_assert!(dev <= 1e-9, "deviation {dev}");
        Ok(())
    });
    Outcome::gate(
        result.is_ok(),
        format!(
            "100 node sets (N<=6), worst abs deviation {:.2e} (tol 1e-9){}",
            worst.get(),
            result.err().map_or(String::new(), |e| format!(", {e}"))
        ),
    )
}

fn tiny_scene(id: u64, labels: &[usize]) -> Scene {
    let n = labels.len() + 1;
    Scene {
        id,
        nodes: (0..n)
            .map(|i| Node {
                features: vec![i as f64],
                bbox: [0.0, 0.0, 1.0, 1.0],
                label: 0,
            })
            .collect(),
        relations: labels
            .iter()
            .enumerate()
            .map(|(i, &p)| Relation {
                subject: i,
                object: i + 1,
                predicate: p,
                noise: None,
            })
            .collect(),
    }
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut mismatches = 0;
    let mut comparisons = 0;
    for _ in 0..100 {
        let c = rng.random_range(2..=5);
        let num_scenes = rng.random_range(1..=3);
        let mut scenes = Vec::new();
        let mut preds = Vec::new();
        for s in 0..num_scenes {
            let p = rng.random_range(1..=4);
            let labels: Vec<usize> = (0..p).map(|_| rng.random_range(0..c)).collect();
            scenes.push(tiny_scene(s, &labels));
            // coarse scores force ties
            let scores: Vec<f64> = (0..p * c).map(|_| f64::from(rng.random_range(0..4u8)) / 4.0).collect();
            preds.push(ScenePrediction {
                scene_id: s,
                scores: Matrix::from_vec(p, c, scores).unwrap(),
            });
        }
        for protocol in Protocol::ALL {
            for k in [1, 2, 5, 100] {
                let a = recall_at_k(&scenes, &preds, k, protocol, c).unwrap();
                let b = oracle_recall(&scenes, &preds, k, protocol, c).unwrap();
                comparisons += 1;
                if a.recall != b.recall || a.tally != b.tally {
                    mismatches += 1;
                }
            }
        }
    }
    let scenes = vec![tiny_scene(0, &[0, 1])];
    let preds = vec![ScenePrediction {
        scene_id: 0,
        scores: Matrix::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.0, 0.7, 0.8]]).unwrap(),
    }];
    let c2 = recall_at_k(&scenes, &preds, 2, Protocol::Constrained, 3).unwrap().recall;
    let u3 = recall_at_k(&scenes, &preds, 3, Protocol::Unconstrained, 3).unwrap().recall;
    Outcome::gate(
        mismatches == 0 && c2 == 0.5 && u3 == 1.0,
        format!("{mismatches}/{comparisons} mismatches; hand example constrained R@2 {c2}, unconstrained R@3 {u3}"),
    )
}

fn observation_groups() -> Outcome {
    let start = Instant::now();
    let exp = ExperimentConfig::load(config_path("observation.json")).unwrap();
    let table = run_observation(&exp, &exp.seeds).unwrap();
    let d = |g: &str, c: &str| table.get(g, c, Protocol::Constrained).unwrap().mean_delta();
    let (wc, wp, sp) = (d("weak", "companion"), d("weak", "primary"), d("strong", "primary"));
    let (fast, t) = within_budget(start, Duration::from_secs(600));
    Outcome::gate(
        wc >= 10.0 && wp >= -3.0 && sp <= wp - 10.0 && fast,
        format!(
            "weak companion {wc:+.2} (>= +10), weak primary {wp:+.2} (>= -3), strong primary {sp:+.2} (<= {:+.2}), {t}",
            wp - 10.0
        ),
    )
}

fn sweep_frontier() -> Outcome {
    let start = Instant::now();
    let exp = ExperimentConfig::load(config_path("longtail.json")).unwrap();
    let gen = match &exp.data {
        Some(corrbalance::experiments::DataSource::Generator(g)) => g.clone(),
        _ => panic!("long-tailed benchmark uses a generator"),
    };
    let head_share = gen.classes[0].share;
    let table = run_sweep(&exp, &exp.seeds).unwrap();
    let mut wins = 0;
    let mut head_wins = 0;
    let mut raw = Vec::new();
    for &seed in &exp.seeds {
        let pcpl = table.row(seed, PCPL_LABEL).unwrap();
        let best = table.sweep_rows(seed).map(|r| r.mean_recall).fold(f64::NEG_INFINITY, f64::max);
        let n1 = table.row(seed, &sweep_label(1.0)).unwrap();
        wins += usize::from(pcpl.mean_recall >= best);
        head_wins += usize::from(pcpl.class_recall[0] > n1.class_recall[0]);
        raw.push(format!(
            "s{seed}: {:.3} vs {:.3}, head {:.3} vs {:.3}",
            pcpl.mean_recall, best, pcpl.class_recall[0], n1.class_recall[0]
        ));
    }
    let n = exp.seeds.len();
    let (fast, t) = within_budget(start, Duration::from_secs(1800));
    let shape_ok = gen.classes.len() >= 6 && head_share >= 0.6;
    Outcome::gate(
        shape_ok && wins >= 4 && head_wins == n && fast,
        format!(
            "pcpl >= sweep max in {wins}/{n} (need 4), head > n=1 in {head_wins}/{n} (need {n}); {}; {t}",
            raw.join("; ")
        ),
    )
}

fn noisy_drop_precision() -> Outcome {
    let start = Instant::now();
    let exp = ExperimentConfig::load(config_path("noisy.json")).unwrap();
    assert_eq!(exp.label_noise, Some(0.1));
    let runs = run_noise_drop(&exp, &exp.seeds).unwrap();
    let precisions: Vec<f64> = runs.iter().map(|r| r.drop_precision.unwrap_or(0.0)).collect();
    let m = mean(&precisions);
    let (fast, t) = within_budget(start, Duration::from_secs(600));
    Outcome::gate(
        m >= 0.30 && fast,
        format!(
            "mean precision {m:.3} (>= 0.30), per seed {:?}, {t}",
            precisions.iter().map(|p| (p * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn normalization_ordering() -> Outcome {
    let exp = ExperimentConfig::load(config_path("longtail.json")).unwrap();
    let table = run_ablation(&exp, &exp.seeds).unwrap();
    let row = |n| table.get(CenterMode::Learnt, n, Protocol::Constrained).unwrap();
    let (mm, sm, sc) = (
        row(NormalizationMode::MinMax),
        row(NormalizationMode::Softmax),
        row(NormalizationMode::Scaling),
    );
    let hits = (0..exp.seeds.len())
        .filter(|&i| mm.mr100[i] >= sm.mr100[i] && mm.mr100[i] >= sc.mr100[i])
        .count();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    Outcome {
        passed: hits >= 3,
        detail: format!(
            "min_max >= softmax and scaling in {hits}/{} seeds (expect 3); min_max [{}] softmax [{}] scaling [{}]",
            exp.seeds.len(),
            fmt(&mm.mr100),
            fmt(&sm.mr100),
            fmt(&sc.mr100)
        ),
        advisory: true,
    }
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let checks: [(&str, fn() -> Outcome); 11] = [
        ("graph_brute_force_equivalence", graph_oracle),
        ("finite_difference_gradients", gradient_suite),
        ("stop_gradient_contract", stop_gradient),
        ("uniform_tau_reduction", uniform_tau_reduction),
        ("drop_mask_algebra", drop_algebra),
        ("encoder_permutation_equivariance", permutation_equivariance),
        ("recall_matches_oracle", metrics_oracle),
        ("observation_group_deltas", observation_groups),
        ("pcpl_beats_reweighting_sweep", sweep_frontier),
        ("noisy_label_drop_precision", noisy_drop_precision),
        ("normalization_ordering_expectation", normalization_ordering),
    ];
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in checks {
            println!("{name}: test");
        }
        return;
    }
    let mut hard_failures = 0;
    let mut ran = 0;
    for (name, check) in checks {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        ran += 1;
        let o = check();
        let tag = match (o.passed, o.advisory) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (expectation)",
        };
        println!("{tag} {name}: {}", o.detail);
        if !o.passed && !o.advisory {
            hard_failures += 1;
        }
    }
    println!("acceptance: {ran} checks, {hard_failures} hard failures");
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
