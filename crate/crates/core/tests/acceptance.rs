//! The eight acceptance criteria, one test each. Every test prints a single
//! `criterion N ...: PASS|FAIL` line to stderr before asserting.

mod common;

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use blendcon_core::ablation::{self, Grid};
use blendcon_core::checkpoint::Checkpoint;
use blendcon_core::config::TrainConfig;
use blendcon_core::contrast::{estimate_prototypes, prototype_nce, Aggregation, ContrastConfig, PrototypeBank, View};
use blendcon_core::data::{generate, generate_to_disk, DatasetSpec};
use blendcon_core::labels::LabelMap;
use blendcon_core::metrics::{asd, dsc, BinaryMask};
use blendcon_core::model::ModelConfig;
use blendcon_core::numerics::{Graph, Tensor};
use blendcon_core::sdb::{blend_batch, blend_style, image_style, normalize_content, BlendBatchPair, EtaDistribution, DEFAULT_EPS};
use blendcon_core::trainer::{train_with, Trainer};
use common::*;
use rand::Rng;

fn verdict(n: u32, what: &str, ok: bool, detail: &str) {
    let status = if ok { "PASS" } else { "FAIL" };
    report(&format!("criterion {n} {what}: {status} ({detail})"));
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

/// Population mean and standard deviation by explicit loops.
fn moments(v: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    for &x in v {
        sum += x;
    }
    let mean = sum / v.len() as f64;
    let mut ss = 0.0;
    for &x in v {
        ss += (x - mean) * (x - mean);
    }
    (mean, (ss / v.len() as f64).sqrt())
}

/// Intensities in `[lo, lo + span]` within `[0, 1]`.
fn random_image(r: &mut rand_chacha::ChaCha8Rng, side: usize, min_span: f64) -> Tensor<f64> {
    let span = r.random_range(min_span..=1.0);
    let lo = r.random_range(0.0..=1.0 - span);
    rand_tensor(r, &[1, side, side], 0.0, 1.0).map(|v| lo + span * v)
}

#[test]
fn c1_sdb_moment_matching() {
    let start = Instant::now();
    let mut r = rng(1);
    let eps = DEFAULT_EPS;
    let (mut worst_mean, mut worst_std, mut worst_recon) = (0.0f64, 0.0f64, 0.0f64);
    let mut worst_shrink = 0.0f64;
    for i in 0..100 {
        let side = r.random_range(4..=32);
        let content = random_image(&mut r, side, 0.2);
        let style_side = r.random_range(4..=32);
        let style_img = random_image(&mut r, style_side, 0.01);
        let eta: f64 = r.random_range(0.0..=1.0);

        let (mc, sc) = moments(content.data());
        let (ms, ss) = moments(style_img.data());
        let sigma_c = (sc * sc + eps).sqrt();
        let sigma_s = (ss * ss + eps).sqrt();
        let want_mu = eta * mc + (1.0 - eta) * ms;
        let want_sigma = eta * sigma_c + (1.0 - eta) * sigma_s;

        let style_l = image_style(&content, eps).unwrap();
        let style_u = image_style(&style_img, eps).unwrap();
        let normed = normalize_content(&content, &style_l);
        let (blended, mixed) = blend_style(&normed, &style_l, &style_u, eta).unwrap();
        let (m, s) = moments(blended.data());
        worst_mean = worst_mean.max((m - want_mu).abs()).max((mixed.mu - want_mu).abs());
        worst_std = worst_std.max((s - want_sigma).abs());
        assert!((mixed.sigma - want_sigma).abs() < 1e-12);

        // The blend keeps the content's shrink factor s / sqrt(s^2 + eps),
        // which is what separates std from sigma; checked down to flat images.
        let faint = random_image(&mut r, side, 0.0).map(|v| v * 10f64.powi(-(i % 4)));
        let (_, sf) = moments(faint.data());
        let style_f = image_style(&faint, eps).unwrap();
        let (out, mixed_f) = blend_style(&normalize_content(&faint, &style_f), &style_f, &style_u, eta).unwrap();
        let (_, so) = moments(out.data());
        worst_shrink = worst_shrink.max((so - mixed_f.sigma * sf / (sf * sf + eps).sqrt()).abs());

        let labeled = vec![(content.clone(), LabelMap::filled(side, side, 0))];
        let via_batch = blend_batch(
            BlendBatchPair {
                labeled: &labeled,
                unlabeled: std::slice::from_ref(&content),
            },
            &EtaDistribution::Constant { value: 1.0 },
            eps,
            &mut r,
        )
        .unwrap();
        let recon = via_batch[0].image.max_abs_diff(&content);
        worst_recon = worst_recon.max(recon);
    }
    let took = start.elapsed();
    let ok = worst_mean < 1e-6
        && worst_std < eps.sqrt() + 1e-6
        && worst_recon < 1e-4
        && worst_shrink < 1e-12
        && took < Duration::from_secs(5);
    verdict(
        1,
        "SDB moment matching",
        ok,
        &format!(
            "mean err {worst_mean:.2e}, std err {worst_std:.2e}, self-style err {worst_recon:.2e}, shrink err {worst_shrink:.2e}, {}",
            secs(took)
        ),
    );
    assert!(ok);
}

#[test]
fn c2_gradient_suite() {
    let start = Instant::now();
    let results = gradient_suite(20);
    let took = start.elapsed();
    let worst = results.iter().map(|f| f.worst).fold(0.0, f64::max);
    let ok = results.iter().all(|f| f.instances >= 20 && f.worst < 1e-4) && took < Duration::from_secs(60);
    let detail: Vec<String> = results
        .iter()
        .map(|f| {
            let skipped = if f.skipped > 0 { format!(", {} kinked skipped", f.skipped) } else { String::new() };
            format!("{} {:.1e} over {}{skipped}", f.name, f.worst, f.instances)
        })
        .collect();
    verdict(2, "gradient suite", ok, &format!("max rel err {worst:.2e}; {}; {}", detail.join("; "), secs(took)));
    assert!(ok);
}

#[test]
fn c3_prototype_and_bank_oracles() {
    let start = Instant::now();
    let mut r = rng(3);
    let mut worst_proto = 0.0f64;
    for _ in 0..200 {
        let (d, c, h, w) = (r.random_range(1..=8), r.random_range(2..=4), r.random_range(1..=8), r.random_range(1..=8));
        let z = rand_tensor(&mut r, &[d, h, w], -1.0, 1.0);
        let p = rand_probs(&mut r, &[1, c, h, w]).reshape(vec![c, h, w]).unwrap();
        let got = estimate_prototypes(&z, &p).unwrap();
        for (g, want) in got.protos.iter().zip(prototype_oracle(&z, &p)) {
            let g = g.as_ref().expect("every class has mass");
            for (a, b) in g.iter().zip(&want) {
                worst_proto = worst_proto.max((a - b).abs());
            }
        }
    }

    let mut worst_agg = 0.0f64;
    for _ in 0..200 {
        let d = r.random_range(1..=8);
        let k = r.random_range(1..=16);
        let entries: Vec<(Vec<f64>, f64)> = (0..k)
            .map(|_| ((0..d).map(|_| r.random_range(-1.0..1.0)).collect(), r.random_range(0.01..1.0)))
            .collect();
        let mut bank = PrototypeBank::new(1, d, k).unwrap();
        bank.set_entries(View::Weak, 0, entries.clone()).unwrap();
        for (mode, weighted) in [(Aggregation::Weighted, true), (Aggregation::Literal, false)] {
            let got = bank.aggregate(View::Weak, 0, mode).unwrap();
            for (a, b) in got.iter().zip(aggregate_oracle(&entries, weighted)) {
                worst_agg = worst_agg.max((a - b).abs());
            }
        }
    }

    let mut fifo_ok = true;
    for seq in 0..1000 {
        let cap = [1, 2, 128][seq % 3];
        let mut bank = PrototypeBank::new(2, 1, cap).unwrap();
        let mut history: [Vec<(Vec<f64>, f64)>; 2] = [Vec::new(), Vec::new()];
        for step in 0..r.random_range(0..300) {
            let class = r.random_range(0..2);
            let entry = (vec![step as f64], r.random_range(0.1..1.0));
            bank.push_entry(View::Strong, class, entry.0.clone(), entry.1).unwrap();
            history[class].push(entry);
        }
        for (class, h) in history.iter().enumerate() {
            let want: VecDeque<_> = h[h.len().saturating_sub(cap)..].iter().cloned().collect();
            fifo_ok &= bank.entries(View::Strong, class) == &want;
            fifo_ok &= bank.entries(View::Weak, class).is_empty();
        }
    }
    let took = start.elapsed();
    let ok = worst_proto < 1e-10 && worst_agg < 1e-10 && fifo_ok && took < Duration::from_secs(10);
    verdict(
        3,
        "prototype and bank oracles",
        ok,
        &format!("prototype err {worst_proto:.2e}, aggregate err {worst_agg:.2e}, FIFO {fifo_ok} over 1000 sequences, {}", secs(took)),
    );
    assert!(ok);
}

fn nce_value(z: Tensor<f64>, protos: &[Option<Vec<f64>>], labels: &[LabelMap], tau: f64) -> f64 {
    let cfg = ContrastConfig {
        tau,
        ..ContrastConfig::default()
    };
    let mut g = Graph::new();
    let zv = g.param(z);
    let loss = prototype_nce(&mut g, zv, protos, labels, None, &cfg).unwrap().unwrap();
    g.value(loss).item()
}

#[test]
fn c4_contrast_closed_forms() {
    let mut r = rng(4);
    let mut worst_same = 0.0f64;
    for c in 2..=4usize {
        for tau in [0.5, 1.0] {
            let d = 5;
            let shared: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            let protos = vec![Some(shared); c];
            let z = rand_tensor(&mut r, &[2, d, 4, 4], -1.0, 1.0);
            let labels = rand_labels(&mut r, 2, c, 4, 4);
            worst_same = worst_same.max((nce_value(z, &protos, &labels, tau) - (c as f64).ln()).abs());
        }
    }

    let mut worst_orth = 0.0f64;
    for tau in [0.5f64, 1.0] {
        let protos = vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0])];
        let labels = rand_labels(&mut r, 1, 2, 3, 3);
        let mut z = Tensor::zeros(vec![1, 2, 3, 3]);
        for (i, &l) in labels[0].data().iter().enumerate() {
            z.data_mut()[l as usize * 9 + i] = r.random_range(0.5..2.0);
        }
        let want = (1.0 + (-1.0 / tau).exp()).ln();
        worst_orth = worst_orth.max((nce_value(z, &protos, &labels, tau) - want).abs());
    }
    let ok = worst_same < 1e-10 && worst_orth < 1e-10;
    verdict(
        4,
        "contrast closed forms",
        ok,
        &format!("identical-prototype err {worst_same:.2e}, orthogonal err {worst_orth:.2e}"),
    );
    assert!(ok);
}

fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> BinaryMask {
    BinaryMask::new(
        h,
        w,
        (0..h * w)
            .map(|i| (y0..y0 + side).contains(&(i / w)) && (x0..x0 + side).contains(&(i % w)))
            .collect(),
    )
    .unwrap()
}

#[test]
fn c5_metric_oracles() {
    let start = Instant::now();
    let a = square(16, 16, 4, 4, 4);
    let hand = [
        dsc(&a, &a).unwrap() == 1.0,
        dsc(&a, &square(16, 16, 10, 10, 4)).unwrap() == 0.0,
        dsc(&a, &square(16, 16, 4, 6, 4)).unwrap() == 0.5,
    ];
    let mut r = rng(5);
    let mut exact = 0;
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..=64), r.random_range(1..=64));
        let (s, g) = (random_mask(&mut r, h, w), random_mask(&mut r, h, w));
        if asd(&s, &g).unwrap() == asd_oracle(&s, &g) {
            exact += 1;
        }
    }
    let took = start.elapsed();
    let ok = hand.iter().all(|&b| b) && exact == 50 && took < Duration::from_secs(30);
    verdict(5, "metric oracles", ok, &format!("DSC hand cases {hand:?}, ASD exact on {exact}/50 masks, {}", secs(took)));
    assert!(ok);
}

fn arm_key(overrides: &[(String, serde_json::Value)]) -> (bool, bool) {
    let get = |k: &str| overrides.iter().find(|(key, _)| key == k).and_then(|(_, v)| v.as_bool()).unwrap();
    (get("sdb_on"), get("ctr_on"))
}

/// Network narrowed to 8 base channels and a 16-dimensional embedding so the
/// twelve runs fit a CPU budget; everything else stays at defaults.
fn end_to_end_config(out: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.base_width = 8;
    cfg.model.embed_dim = 16;
    cfg.checkpoint_every = 0;
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn c6_end_to_end_gap() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg = end_to_end_config(dir.path());
    assert_eq!(cfg.iterations, 2000);
    let data = generate(&DatasetSpec::default()).unwrap();
    assert_eq!((data.labeled.len(), data.unlabeled.len()), (10, 190));
    let rows = ablation::ablate_with(&cfg, &Grid::components().with_seeds(&[0, 1, 2]), &data).unwrap();
    let mut arms: BTreeMap<(bool, bool), Vec<f64>> = BTreeMap::new();
    for row in &rows {
        report(&format!("  {}: test DSC {:.4}", row.name, row.mean_dsc));
        arms.entry(arm_key(&row.overrides)).or_default().push(row.mean_dsc);
    }
    let mean = |k| {
        let v: &Vec<f64> = &arms[&k];
        assert_eq!(v.len(), 3);
        100.0 * v.iter().sum::<f64>() / 3.0
    };
    let base = mean((false, false));
    let (sdb, ctr, full) = (mean((true, false)) - base, mean((false, true)) - base, mean((true, true)) - base);
    let ok = full >= 2.0 && sdb >= 0.5 && ctr >= 0.5;
    verdict(
        6,
        "end-to-end gap",
        ok,
        &format!(
            "baseline {base:.2} DSC points; +SDB {sdb:+.2}, +ctr {ctr:+.2}, full {full:+.2}; 3 seeds, {:.1} min",
            start.elapsed().as_secs_f64() / 60.0
        ),
    );
    assert!(ok);
}

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        height: 32,
        width: 32,
        labeled: 4,
        unlabeled: 12,
        test: 4,
        ..DatasetSpec::default()
    }
}

fn small_config(out: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.batch_size = 4;
    cfg.model = ModelConfig {
        base_width: 4,
        embed_dim: 8,
        height: 32,
        width: 32,
        ..ModelConfig::default()
    };
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn tensor_bits(c: &Checkpoint) -> Vec<(String, Vec<u64>)> {
    c.tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn c7_determinism_and_resume() {
    let root = tempfile::tempdir().unwrap();
    let data = generate(&small_spec()).unwrap();
    let run = |name: &str| {
        let mut cfg = small_config(&root.path().join(name));
        cfg.iterations = 100;
        cfg.checkpoint_every = 0;
        train_with::<f64>(&cfg, data.clone(), None).unwrap();
        cfg
    };
    let (a, b) = (run("a"), run("b"));
    let log = |cfg: &TrainConfig| std::fs::read_to_string(cfg.out_dir.join("train_log.csv")).unwrap();
    let ckpt = |cfg: &TrainConfig| Checkpoint::load(&cfg.out_dir.join("checkpoint_final.bin")).unwrap();
    let repeat_ok = log(&a) == log(&b) && tensor_bits(&ckpt(&a)) == tensor_bits(&ckpt(&b));

    let mut c = small_config(&root.path().join("c"));
    c.iterations = 100;
    c.checkpoint_every = 0;
    let mut first = Trainer::<f64>::new(c.clone(), data.clone()).unwrap();
    first.run_until(50, |_, _| Ok(())).unwrap();
    let half = root.path().join("half.bin");
    first.checkpoint().unwrap().save(&half).unwrap();
    drop(first);
    train_with::<f64>(&c, data, Some(&half)).unwrap();
    let tail: Vec<String> = log(&a).lines().skip(51).map(str::to_string).collect();
    let resumed: Vec<String> = log(&c).lines().skip(1).map(str::to_string).collect();
    let final_c = ckpt(&c);
    let resume_ok = tail.len() == 50 && tail == resumed && tensor_bits(&ckpt(&a)) == tensor_bits(&final_c) && final_c.iteration == 100;
    let ok = repeat_ok && resume_ok;
    verdict(
        7,
        "determinism and checkpointing",
        ok,
        &format!("repeat run bit-exact {repeat_ok}, resume at 50 bit-exact {resume_ok}"),
    );
    assert!(ok);
}

#[test]
fn c8_ablation_grids() {
    let root = tempfile::tempdir().unwrap();
    let data_dir = root.path().join("data");
    generate_to_disk(&small_spec(), &data_dir).unwrap();
    let grids = [("components", 4usize, "sdb_on"), ("eta", 3, "sdb.eta"), ("directions", 5, "ctr_w_on"), ("bank", 4, "bank_size")];
    let mut shapes = Vec::new();
    let mut ok = true;
    for (name, want, column) in grids {
        let mut cfg = small_config(&root.path().join(name));
        cfg.data_root = data_dir.clone();
        cfg.iterations = 2;
        cfg.checkpoint_every = 0;
        ablation::ablate(&cfg, &Grid::preset(name).unwrap()).unwrap();
        let text = std::fs::read_to_string(cfg.out_dir.join("ablation.csv")).unwrap();
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let headers = reader.headers().unwrap().clone();
        let records: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        let col = |h: &str| headers.iter().position(|x| x == h);
        let well_formed = records.len() == want
            && col(column).is_some()
            && records.iter().all(|r| {
                r.len() == headers.len()
                    && r[col("mean_dsc").unwrap()].parse::<f64>().is_ok_and(|v| (0.0..=1.0).contains(&v))
                    && (1..4).all(|c| r[col(&format!("dsc_class{c}")).unwrap()].parse::<f64>().is_ok())
            });
        ok &= well_formed;
        shapes.push(format!("{name} {}x{}", records.len(), headers.len()));
    }
    verdict(8, "ablation grids", ok, &shapes.join(", "));
    assert!(ok);
}
