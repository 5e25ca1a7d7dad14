//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use grappa::adaptors::{norm_softmax_objective, AdaptedModel, AdaptorSet, NormSoftmaxHead};
use grappa::backbone::{extract_features, prepare_input};
use grappa::fusion::{
    adaptor_stack, attention_weights, avg_fuse_layer, barlow_twins_loss, build_knn_graph, consistency_objective,
    fuse_layer, fusion_attention, train_fusion, trainable_registry, BarlowConfig, FusionLayer, FusionMode,
    FusionOptions, FusionTrainConfig, FusionTrainables, FusionVariant, GrappaModel, Projector,
};
use grappa::nn::Parameters;
use grappa::pipeline::{PipelineConfig, Runner, Step, Summary};
use grappa::pseudolabels::{assign, build_granularities, kmeans_fit, FeatureStore, KMeansConfig};
use grappa::retrieval::{evaluate_task, EvalTask};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn n1_equals_single_adaptor() -> Outcome {
    let backbone = toy_backbone(1);
    let sets = toy_adaptors(&backbone, 1, 10);
    let images = random_images(6, &backbone.config, 2);
    let single = extract_features(
        &AdaptedModel {
            backbone: &backbone,
            adaptors: &sets[0],
        },
        &images,
        3,
    )
    .map_err(|e| e.to_string())?;
    let fused = GrappaModel::new(backbone, sets, FusionMode::Attention, FusionOptions::default(), 0.5, 3)
        .map_err(|e| e.to_string())?;
    let fused = extract_features(&fused, &images, 3).map_err(|e| e.to_string())?;
    let err = max_rel_diff(&single, &fused);
    check(err <= 1e-5, format!("max rel diff {err:.2e}"), format!("max rel diff {err:.2e} > 1e-5"))
}

fn zero_init_equals_average() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (batch, tokens, dim, n) = (3, 5, 8, 4);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let h_tilde = random_matrix(batch * tokens, dim, &mut rng);
        let y = random_matrix(batch * tokens, dim, &mut rng);
        let h_bar = &h_tilde + &y;
        let branches: Vec<Array2<f64>> = (0..n).map(|_| random_matrix(batch * tokens, dim, &mut rng)).collect();
        let stack = adaptor_stack(&branches, &y);
        let zero = fuse_layer(&h_tilde, &h_bar, &stack, &FusionLayer::zeros(dim), batch, &FusionOptions::default())
            .map_err(|e| e.to_string())?;
        let avg = avg_fuse_layer(&h_tilde, &h_bar, &stack, batch).map_err(|e| e.to_string())?;
        worst = worst.max(max_rel_diff(&zero, &avg));
    }
    // Whole model: every layer zero-initialized against uniform mode.
    let backbone = toy_backbone(7);
    let sets = toy_adaptors(&backbone, 3, 20);
    let images = random_images(5, &backbone.config, 8);
    let mut attn = GrappaModel::new(backbone, sets, FusionMode::Attention, FusionOptions::default(), 0.5, 1)
        .map_err(|e| e.to_string())?;
    attn.fusion = (0..attn.fusion.len()).map(|_| FusionLayer::zeros(8)).collect();
    let mut avg = attn.clone();
    avg.mode = FusionMode::Average;
    let a = extract_features(&attn, &images, 5).map_err(|e| e.to_string())?;
    let b = extract_features(&avg, &images, 5).map_err(|e| e.to_string())?;
    let model_err = max_rel_diff(&a, &b);
    let ok = worst == 0.0 && model_err == 0.0;
    check(
        ok,
        format!("layer max diff {worst:.1e}, model max diff {model_err:.1e} (exact)"),
        format!("layer max diff {worst:.2e}, model max diff {model_err:.2e}"),
    )
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let batch = 1 + trial % 4;
        let tokens = 2 + trial % 5;
        let dim = 4 + 2 * (trial % 3);
        let n = 1 + trial % 5;
        let h_tilde = random_matrix(batch * tokens, dim, &mut rng);
        let y = random_matrix(batch * tokens, dim, &mut rng);
        let h_bar = &h_tilde + &y;
        let branches: Vec<Array2<f64>> = (0..n).map(|_| random_matrix(batch * tokens, dim, &mut rng)).collect();
        let layer = FusionLayer {
            query: random_matrix(dim, dim, &mut rng),
            key: random_matrix(dim, dim, &mut rng),
        };
        let stack = adaptor_stack(&branches, &y);
        let fused = fuse_layer(&h_tilde, &h_bar, &stack, &layer, batch, &FusionOptions::default())
            .map_err(|e| e.to_string())?;
        let alpha = fusion_attention(&h_bar, &stack, &layer, batch, &FusionOptions::default())
            .map_err(|e| e.to_string())?;
        let mut direct = h_bar.clone();
        for b in 0..batch {
            for t in 0..tokens {
                let row = b * tokens + t;
                for (i, a) in branches.iter().enumerate() {
                    for d in 0..dim {
                        direct[[row, d]] += alpha[[b, i]] * a[[row, d]];
                    }
                }
            }
        }
        worst = worst.max(max_rel_diff(&fused, &direct));
    }
    check(worst <= 1e-5, format!("100 instances, max rel diff {worst:.2e}"), format!("max rel diff {worst:.2e}"))
}

/// Largest per-tensor relative error between analytic and central-difference
/// gradients. Tensors whose gradients are both below `zero` in every entry
/// count as agreeing; their number is returned alongside.
fn compare_grads(
    analytic: &[Array2<f64>],
    numeric: &[Array2<f64>],
    zero: f64,
) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut zeros = 0;
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.iter().chain(n.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        if scale < zero {
            zeros += 1;
            continue;
        }
        let diff = a.iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        worst = worst.max(diff / scale);
    }
    (worst, zeros)
}

fn perturbed(base: &Array2<f64>, idx: usize, delta: f64) -> Array2<f64> {
    let mut m = base.clone();
    let cols = m.ncols();
    m[[idx / cols, idx % cols]] += delta;
    m
}

/// Central differences of `f` in every parameter of `base`.
fn numeric_grads<T: Clone + Parameters>(base: &T, h: f64, f: impl Fn(&T) -> f64) -> Vec<Array2<f64>> {
    let originals: Vec<Array2<f64>> = base.named_params().into_iter().map(|(_, p)| p.clone()).collect();
    originals
        .iter()
        .enumerate()
        .map(|(i, orig)| {
            let mut g = Array2::zeros(orig.dim());
            for idx in 0..orig.len() {
                let eval = |delta: f64| {
                    let mut p = base.clone();
                    *p.params_mut()[i] = perturbed(orig, idx, delta);
                    f(&p)
                };
                g[[idx / orig.ncols(), idx % orig.ncols()]] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            g
        })
        .collect()
}

fn gradient_checks() -> Outcome {
    let h = 1e-5;
    let backbone = toy_backbone(11);
    let images = random_images(4, &backbone.config, 12);
    let input = prepare_input(&images, &backbone.config).map_err(|e| e.to_string())?;

    // Norm-softmax through the adaptors and the class weights.
    let set = toy_adaptors(&backbone, 1, 30).remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let head = NormSoftmaxHead::init(3, 8, 4.0, &mut rng);
    let labels = [0, 2, 1, 2];
    let loss = |s: &AdaptorSet, hd: &NormSoftmaxHead| {
        norm_softmax_objective(&backbone, s, hd, &input, &labels).unwrap().0
    };
    let (_, analytic, _) =
        norm_softmax_objective(&backbone, &set, &head, &input, &labels).map_err(|e| e.to_string())?;
    let mut numeric = numeric_grads(&set, h, |s| loss(s, &head));
    let mut head_grad = Array2::zeros(head.weight.dim());
    for idx in 0..head.weight.len() {
        let eval = |delta: f64| {
            let hd = NormSoftmaxHead {
                weight: perturbed(&head.weight, idx, delta),
                gamma: head.gamma,
            };
            loss(&set, &hd)
        };
        head_grad[[idx / 8, idx % 8]] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    numeric.push(head_grad);
    let (ns_err, ns_zero) = compare_grads(&analytic, &numeric, 1e-9);
    let ns_count = analytic.len();

    // Scaled cross-correlation objective through fusion and projector.
    let sets = toy_adaptors(&backbone, 3, 40);
    let model = GrappaModel::new(backbone.clone(), sets, FusionMode::Attention, FusionOptions::default(), 0.5, 2)
        .map_err(|e| e.to_string())?;
    let trainables = FusionTrainables {
        fusion: model
            .fusion
            .iter()
            .map(|f| FusionLayer {
                query: f.query.clone(),
                key: random_matrix(8, 8, &mut rng) * 0.5,
            })
            .collect(),
        projector: Projector::init(8, 32, 0.5, &mut rng),
    };
    let other = random_images(4, &backbone.config, 14);
    let input_b = prepare_input(&other, &backbone.config).map_err(|e| e.to_string())?;
    let barlow = BarlowConfig::default();
    let (_, analytic, _) =
        consistency_objective(&model, &trainables, &input, &input_b, 4, &barlow).map_err(|e| e.to_string())?;
    let numeric = numeric_grads(&trainables, h, |t| {
        consistency_objective(&model, t, &input, &input_b, 4, &barlow).unwrap().0
    });
    let (bt_err, bt_zero) = compare_grads(&analytic, &numeric, 1e-9);
    let detail = format!(
        "norm-softmax max rel err {ns_err:.2e} over {ns_count} tensors ({ns_zero} with zero gradient), \
         cross-correlation max rel err {bt_err:.2e} over {} tensors ({bt_zero} with zero gradient)",
        analytic.len()
    );
    check(ns_err < 1e-4 && bt_err < 1e-4, detail.clone(), detail)
}

fn frozen_parameter_audit() -> Outcome {
    let spec = grappa::data::SyntheticSpec {
        images_per_class: 4,
        image_size: 8,
        ..grappa::data::SyntheticSpec::default()
    };
    let bench = grappa::data::generate_synthetic_benchmark(&spec).map_err(|e| e.to_string())?;
    let mut config = toy_config();
    config.init_std = 0.02;
    let mut backbone = grappa::backbone::BackboneParams::random_init(&config, 3).map_err(|e| e.to_string())?;
    backbone.freeze();
    let before = backbone.fingerprint();
    let images = bench.pool.images();
    let feats = extract_features(&backbone, images, 16).map_err(|e| e.to_string())?;
    let store = FeatureStore::new(feats, bench.pool.ids(), before.clone()).map_err(|e| e.to_string())?;
    let pseudo = build_granularities(&store, &[3, 6], 0, &KMeansConfig::default()).map_err(|e| e.to_string())?;
    let adaptor_config = grappa::adaptors::AdaptorConfig {
        epochs: 2,
        ..Default::default()
    };
    let mut sets = Vec::new();
    for (i, p) in pseudo.iter().enumerate() {
        let mut s = grappa::adaptors::train_adaptor_set(&backbone, images, p, &adaptor_config, 50 + i as u64)
            .map_err(|e| e.to_string())?;
        s.granularity = i;
        sets.push(s);
    }
    let after_step2 = backbone.fingerprint();
    let model = GrappaModel::new(backbone, sets, FusionMode::Attention, FusionOptions::default(), 0.02, 4)
        .map_err(|e| e.to_string())?;
    let frozen = model.frozen_fingerprint();
    let fusion_config = FusionTrainConfig {
        epochs: 1,
        batch_size: 16,
        k_nn: 3,
        ..FusionTrainConfig::default()
    };
    let registry = trainable_registry(&model, &fusion_config);
    let trained = train_fusion(model, images, FusionVariant::Ac, &fusion_config, 5).map_err(|e| e.to_string())?;
    let after_step3 = trained.model.frozen_fingerprint();
    let mut expected: Vec<String> = (0..2)
        .flat_map(|l| [format!("fusion.{l}.query"), format!("fusion.{l}.key")])
        .collect();
    expected.extend(
        ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
            .iter()
            .map(|s| format!("projector.{s}")),
    );
    let (mut got, mut want) = (registry.clone(), expected);
    got.sort();
    want.sort();
    let ok = before == after_step2 && frozen == after_step3 && got == want;
    check(
        ok,
        format!("backbone {}.. unchanged, backbone+adaptors {}.. unchanged, registry {registry:?}", &before[..12], &frozen[..12]),
        format!(
            "step 2 {} -> {}, step 3 {} -> {}, registry {got:?} vs {want:?}",
            &before[..12],
            &after_step2[..12],
            &frozen[..12],
            &after_step3[..12]
        ),
    )
}

fn attention_contract() -> Outcome {
    let backbone = toy_backbone(21);
    let sets = toy_adaptors(&backbone, 4, 60);
    let mut model = GrappaModel::new(backbone, sets, FusionMode::Attention, FusionOptions::default(), 1.0, 6)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    let mut min = f64::INFINITY;
    for pass in 0..1000 {
        let scale = [0.1, 1.0, 5.0][pass % 3];
        for f in &mut model.fusion {
            f.query = random_matrix(8, 8, &mut rng) * scale;
            f.key = random_matrix(8, 8, &mut rng) * scale;
        }
        let images = random_images(2, &model.backbone.config, 1000 + pass as u64);
        let input = prepare_input(&images, &model.backbone.config).map_err(|e| e.to_string())?;
        for alpha in attention_weights(&model, &input, 2).map_err(|e| e.to_string())? {
            for row in alpha.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
                min = min.min(row.iter().cloned().fold(f64::INFINITY, f64::min));
            }
        }
    }
    check(
        worst <= 1e-6 && min >= 0.0,
        format!("1000 passes x 2 layers, max |sum - 1| {worst:.1e}, min weight {min:.2e}"),
        format!("max |sum - 1| {worst:.2e}, min weight {min:.2e}"),
    )
}

/// O(n^2) reference: rank of `j` for query `q` is the number of items that
/// beat it under (higher cosine, lower id).
fn oracle_metrics(emb: &Array2<f64>, labels: &[usize]) -> Vec<Option<(f64, f64)>> {
    let n = emb.nrows();
    let cos = |a: usize, b: usize| {
        let (x, y) = (emb.row(a), emb.row(b));
        x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt())
    };
    (0..n)
        .map(|q| {
            let r = (0..n).filter(|&j| j != q && labels[j] == labels[q]).count();
            if r == 0 {
                return None;
            }
            let mut at = vec![usize::MAX; n - 1];
            for j in (0..n).filter(|&j| j != q) {
                let sj = cos(q, j);
                let rank = (0..n)
                    .filter(|&o| o != q && o != j)
                    .filter(|&o| {
                        let so = cos(q, o);
                        so > sj || (so == sj && o < j)
                    })
                    .count();
                at[rank] = j;
            }
            let mut hits = 0;
            let mut ap = 0.0;
            for (i, &j) in at.iter().take(r).enumerate() {
                if labels[j] == labels[q] {
                    hits += 1;
                    ap += hits as f64 / (i + 1) as f64;
                }
            }
            Some((hits as f64 / r as f64, ap / r as f64))
        })
        .collect()
}

fn oracle_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for inst in 0..100 {
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=6);
        let classes = rng.random_range(1..=6);
        // Odd instances: power-of-two multiples of signed axis vectors, whose
        // cosines are exactly -1, 0 or 1 under any summation order, so ties
        // are exact. Even instances: continuous values without ties.
        let emb = if inst % 2 == 1 {
            let mut m = Array2::zeros((n, d));
            for mut row in m.rows_mut() {
                let axis = rng.random_range(0..d);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                row[axis] = sign * f64::powi(2.0, rng.random_range(-3..4));
            }
            m
        } else {
            random_matrix(n, d, &mut rng)
        };
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let report = evaluate_task(&EvalTask {
            name: "t".into(),
            embeddings: emb.clone(),
            labels: labels.clone(),
        });
        let expected = oracle_metrics(&emb, &labels);
        let scored: Vec<(f64, f64)> = expected.iter().flatten().cloned().collect();
        match report {
            Err(_) if scored.is_empty() => continue,
            Err(e) => return Err(format!("instance {inst}: {e}")),
            Ok(rep) => {
                let got: Vec<(f64, f64)> = rep.queries.iter().map(|q| (q.rp, q.map_at_r)).collect();
                if got != scored {
                    let bad: Vec<_> = got.iter().zip(&scored).filter(|(a, b)| a != b).take(3).collect();
                    return Err(format!("instance {inst}: per-query metrics differ from the exhaustive scan {bad:?}"));
                }
            }
        }
    }
    // k-means assignments against a nearest-centroid scan.
    for seed in 0..20 {
        let z = random_matrix(60, 4, &mut rng);
        let set = kmeans_fit(&z, 5, seed, 100, 1e-6).map_err(|e| e.to_string())?;
        let brute: Vec<usize> = z
            .rows()
            .into_iter()
            .map(|x| {
                let mut best = (0, f64::INFINITY);
                for (c, m) in set.centroids.rows().into_iter().enumerate() {
                    let d: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                best.0
            })
            .collect();
        if assign(&z, &set.centroids).map_err(|e| e.to_string())? != brute {
            return Err(format!("k-means seed {seed}: assign() differs from the scan"));
        }
    }
    // Exact k-NN against a full scan.
    for seed in 0..20u64 {
        let z = random_matrix(80, 3, &mut rng);
        let k = 1 + seed as usize % 7;
        let graph = build_knn_graph(&z, k, 0).map_err(|e| e.to_string())?;
        for i in 0..z.nrows() {
            let mut others: Vec<(f64, usize)> = (0..z.nrows())
                .filter(|&j| j != i)
                .map(|j| (z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b) * (a - b)).sum(), j))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = others.iter().take(k).map(|o| o.1).collect();
            if graph.neighbors[i] != want {
                return Err(format!("k-NN seed {seed}, point {i}: {:?} vs {want:?}", graph.neighbors[i]));
            }
        }
    }
    Ok("100 metric instances exact (50 with exact cosine ties), 20 k-means and 20 k-NN instances match brute force".into())
}

fn lloyd_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut steps = 0;
    for seed in 0..50u64 {
        let n = rng.random_range(10..80);
        let z = random_matrix(n, 3, &mut rng);
        let k = rng.random_range(1..=n.min(8));
        let set = kmeans_fit(&z, k, seed, 100, 0.0).map_err(|e| e.to_string())?;
        for w in set.inertia_history.windows(2) {
            steps += 1;
            if w[1] > w[0] {
                return Err(format!("seed {seed}: inertia rose from {} to {}", w[0], w[1]));
            }
        }
    }
    let z = random_matrix(12, 3, &mut rng);
    let full = kmeans_fit(&z, 12, 0, 100, 0.0).map_err(|e| e.to_string())?;
    check(
        full.inertia == 0.0,
        format!("50 runs, {steps} consecutive pairs non-increasing; k = n inertia 0"),
        format!("k = n inertia {}", full.inertia),
    )
}

fn barlow_sanity() -> Outcome {
    // Columns of a 4x4 Hadamard matrix without the constant one: zero mean,
    // unit variance, mutually orthogonal.
    let z = ndarray::array![[1.0, 1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, -1.0], [-1.0, -1.0, 1.0]];
    let self_loss = barlow_twins_loss(&z, &z, None, &BarlowConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = random_matrix(6, 5, &mut rng);
        let b = random_matrix(6, 5, &mut rng);
        let p = Projector::init(5, 12, 0.4, &mut rng);
        let ab = barlow_twins_loss(&a, &b, Some(&p), &BarlowConfig::default()).map_err(|e| e.to_string())?;
        let ba = barlow_twins_loss(&b, &a, Some(&p), &BarlowConfig::default()).map_err(|e| e.to_string())?;
        worst = worst.max((ab - ba).abs());
    }
    check(
        self_loss < 1e-6 && worst <= 1e-10,
        format!("self loss {self_loss:.2e}, max swap diff {worst:.1e}"),
        format!("self loss {self_loss:.2e}, max swap diff {worst:.2e}"),
    )
}

/// Values of the first verified desk run, seed 0.
const PINNED_MEAN_RP: [(&str, f64); 7] = [
    ("frozen", 0.5421741452991454),
    ("a0", 0.5529113247863245),
    ("a1", 0.5028846153846156),
    ("a2", 0.5231570512820513),
    ("avg", 0.5452190170940171),
    ("tc", 0.5452190170940171),
    ("ac", 0.5452190170940171),
];
const PIN_TOL: f64 = 1e-6;

fn run_desk(out: &Path) -> Result<(Summary, f64), String> {
    let path = repo_root().join("configs/desk.toml");
    let (config, text) = PipelineConfig::load(&path).map_err(|e| e.to_string())?;
    let mut runner = Runner::new(config, text, Some(out.to_path_buf())).map_err(|e| e.to_string())?;
    let start = Instant::now();
    runner.run(Step::All).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let bytes = std::fs::read(out.join("reports/summary.json")).map_err(|e| e.to_string())?;
    Ok((serde_json::from_slice(&bytes).map_err(|e| e.to_string())?, secs))
}

fn desk_directional(summary: &Summary, secs: f64) -> Outcome {
    let frozen = summary.row("frozen").ok_or("no frozen row")?;
    let singles: Vec<_> = ["a0", "a1", "a2"].iter().filter_map(|m| summary.row(m)).collect();
    let mut notes = Vec::new();
    let mut ok = singles.len() == 3;
    for (t, (task, base)) in frozen.task_rp.iter().enumerate() {
        let best = singles
            .iter()
            .map(|r| (r.model.as_str(), r.task_rp[t].1))
            .fold(("", f64::NEG_INFINITY), |b, x| if x.1 > b.1 { x } else { b });
        ok &= best.1 > *base;
        notes.push(format!("{task}: {} {:.4} vs frozen {base:.4}", best.0, best.1));
        let oracle = summary
            .oracle_choices
            .iter()
            .find(|c| &c.0 == task)
            .ok_or("missing oracle choice")?;
        ok &= oracle.2 == best.1;
    }
    for m in ["avg", "ac"] {
        let r = summary.row(m).ok_or(format!("no {m} row"))?;
        ok &= r.mean_rp >= frozen.mean_rp;
        notes.push(format!("{m} mean {:.4} vs frozen {:.4}", r.mean_rp, frozen.mean_rp));
    }
    for (m, want) in PINNED_MEAN_RP {
        let got = summary.row(m).map(|r| r.mean_rp).unwrap_or(f64::NAN);
        if !((got - want).abs() <= PIN_TOL) {
            ok = false;
            notes.push(format!("{m} mean RP {got} drifted from pinned {want}"));
        }
    }
    ok &= secs < 15.0 * 60.0;
    notes.push(format!("{secs:.0}s"));
    check(ok, notes.join("; "), notes.join("; "))
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(first.join("reports")).map_err(|e| e.to_string())? {
        let p = entry.map_err(|e| e.to_string())?.path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        let a = std::fs::read(&p).map_err(|e| e.to_string())?;
        let b = std::fs::read(second.join("reports").join(&name)).map_err(|e| format!("{name}: {e}"))?;
        files.insert(name, a == b);
    }
    let differing: Vec<_> = files.iter().filter(|(_, same)| !**same).map(|(n, _)| n.clone()).collect();
    check(
        differing.is_empty() && !files.is_empty(),
        format!("{} report files byte-identical", files.len()),
        format!("differing: {differing:?}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: &str, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("PASS  {id:<3} {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {id:<3} {name}: {detail}")
            }
        }
    };
    report("1a", "single adaptor set fusion equals adapted model", n1_equals_single_adaptor());
    report("1b", "zero query/key fusion equals uniform average", zero_init_equals_average());
    report("1c", "fused output decomposes into layer output plus weighted branches", decomposition_identity());
    report("2", "gradient checks", gradient_checks());
    report("3", "frozen parameter audit", frozen_parameter_audit());
    report("4", "attention weights form a distribution", attention_contract());
    report("5", "metrics, k-means and k-NN against brute force", oracle_correctness());
    report("6", "Lloyd iterations never raise inertia", lloyd_monotonicity());
    report("8", "cross-correlation loss sanity", barlow_sanity());

    let first = tempfile::tempdir().expect("temp dir");
    let second = tempfile::tempdir().expect("temp dir");
    match run_desk(first.path()) {
        Ok((summary, secs)) => {
            report("7", "desk-scale directional improvement", desk_directional(&summary, secs));
            match run_desk(second.path()) {
                Ok(_) => report("9", "rerun reproduces reports byte for byte", determinism(first.path(), second.path())),
                Err(e) => report("9", "rerun reproduces reports byte for byte", Err(e)),
            }
        }
        Err(e) => {
            report("7", "desk-scale directional improvement", Err(e.clone()));
            report("9", "rerun reproduces reports byte for byte", Err(e));
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
