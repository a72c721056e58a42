//! Acceptance criteria, one PASS/FAIL line each.

mod common;

use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use superand::augmentation::{augment, AugmentPolicy};
use superand::data_io::{decode_checkpoint, encode_checkpoint, parse_config};
use superand::encoder::{init_encoder, EncoderShape};
use superand::evaluator::{embed_images, knn_evaluate, neighborhood_consistency, weighted_knn_predict, LabeledEmbeddings};
use superand::losses::{aug_loss, and_loss, total_loss, ue_loss};
use superand::memory_bank::MemoryBank;
use superand::neighborhood::{discover_neighbors, instance_entropies, select_curriculum};
use superand::numerics::{dot, shannon_entropy};
use superand::probability::{augmented_pair_probs, excluded_probs, instance_probs, relationship_vector};
use superand::trainer::{schedules, train, TrainConfig, TrainEvent, TrainOutcome, TrainState, Trainer};

const TAUS: [f64; 5] = [0.07, 0.1, 0.2, 0.5, 1.0];
const GRAD_TOL: f64 = 1e-4;
const CONFIGS: usize = 25;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { name, pass, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut worst = [0.0f64; 5];
    let mut r = rng(20);
    for _ in 0..CONFIGS {
        let n = r.random_range(1..=8);
        let k = r.random_range(1..=3);
        let big_n = r.random_range((n.max(k + 1))..=32);
        let d = r.random_range(2..=8);
        let tau = TAUS[r.random_range(0..TAUS.len())];
        let w = r.random_range(0.0..1.0);
        let bank = random_bank(&mut r, big_n, d);
        let (idx, mem) = random_batch(&mut r, n, big_n, k);
        let v: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();
        let vh: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();

        let and = and_loss(&bank, &v, &idx, &mem, tau).unwrap();
        let f = fd_rows(|x| and_loss(&bank, x, &idx, &mem, tau).unwrap().value, &v);
        worst[0] = worst[0].max(rel_err(&flatten(&and.grad_v), &f));

        let ue = ue_loss(&bank, &v, &idx, tau).unwrap();
        let f = fd_rows(|x| ue_loss(&bank, x, &idx, tau).unwrap().value, &v);
        worst[1] = worst[1].max(rel_err(&flatten(&ue.grad_v), &f));

        let aug = aug_loss(&bank, &v, &vh, tau).unwrap();
        let mut a = flatten(&aug.grad_v);
        a.extend(flatten(&aug.grad_v_hat));
        let mut f = fd_rows(|x| aug_loss(&bank, x, &vh, tau).unwrap().value, &v);
        f.extend(fd_rows(|x| aug_loss(&bank, &v, x, tau).unwrap().value, &vh));
        worst[2] = worst[2].max(rel_err(&a, &f));

        let total = total_loss(&and, &ue, &aug, w).unwrap();
        let value = |x: &[Vec<f64>], xh: &[Vec<f64>]| {
            and_loss(&bank, x, &idx, &mem, tau).unwrap().value
                + w * ue_loss(&bank, x, &idx, tau).unwrap().value
                + aug_loss(&bank, x, xh, tau).unwrap().value
        };
        let mut a = flatten(&total.grad_v);
        a.extend(flatten(&total.grad_v_hat));
        let mut f = fd_rows(|x| value(x, &vh), &v);
        f.extend(fd_rows(|x| value(&v, x), &vh));
        worst[3] = worst[3].max(rel_err(&a, &f));
    }
    let mut c = 0;
    while c < CONFIGS {
        let n = r.random_range(1..=4);
        let big_n = r.random_range((n.max(2))..=12);
        let side = r.random_range(3..=5);
        let shape = EncoderShape {
            height: side,
            width: side,
            channels: 3,
            hidden: r.random_range(2..=5),
            embed_dim: r.random_range(2..=8),
        };
        let params = init_encoder(shape, 100 + c as u64).unwrap();
        let images: Vec<_> = (0..n).map(|_| random_image(&mut r, side, side)).collect();
        let augmented = images
            .iter()
            .map(|im| augment(im, &mut r, &AugmentPolicy::default()).unwrap())
            .collect();
        let (indices, membership) = random_batch(&mut r, n, big_n, 1);
        let problem = ChainProblem {
            bank: random_bank(&mut r, big_n, shape.embed_dim),
            images,
            augmented,
            indices,
            membership,
            tau: TAUS[r.random_range(0..TAUS.len())],
            w: r.random_range(0.0..1.0),
        };
        if !problem.well_defined(&params) {
            continue;
        }
        let (a, f) = problem.compare(&params);
        worst[4] = worst[4].max(rel_err(&a, &f));
        c += 1;
    }
    let elapsed = start.elapsed();
    let pass = worst.iter().all(|&e| e < GRAD_TOL) && within(elapsed, 30.0);
    verdict(
        "gradient suite",
        pass,
        format!(
            "{CONFIGS} configs per term; max rel err and {:.1e}, ue {:.1e}, aug {:.1e}, total {:.1e}, encoder chain {:.1e} (< {GRAD_TOL:.0e}); {:.2}s (< 30s)",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            worst[4],
            elapsed.as_secs_f64()
        ),
    )
}

fn brute_neighbors(bank: &MemoryBank, k: usize) -> Vec<Vec<usize>> {
    (0..bank.len())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..bank.len())
                .filter(|&j| j != i)
                .map(|j| (dot(bank.row(i), bank.row(j)), j))
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

fn brute_knn(bank: &MemoryBank, labels: &[u32], q: &[f64], k: usize, tau: f64) -> u32 {
    let mut all: Vec<(f64, usize)> = (0..bank.len()).map(|i| (dot(bank.row(i), q), i)).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut scores = std::collections::BTreeMap::new();
    for &(s, i) in all.iter().take(k) {
        *scores.entry(labels[i]).or_insert(0.0) += (s / tau).exp();
    }
    let mut best = (u32::MAX, f64::NEG_INFINITY);
    for (c, s) in scores {
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

fn oracle_suite() -> Verdict {
    let start = Instant::now();
    let mut r = rng(21);
    let mut nb_ok = 0;
    for b in 0..50 {
        let n = r.random_range(2..=200);
        let d = r.random_range(2..=8);
        let mut rows: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut r, d)).collect();
        if b % 5 == 0 {
            // exact duplicates exercise tie-breaking
            for i in (1..n).step_by(3) {
                rows[i] = rows[i - 1].clone();
            }
        }
        let bank = MemoryBank::from_rows(&rows).unwrap();
        let k = r.random_range(1..=(n - 1).min(10));
        if discover_neighbors(&bank, k).unwrap() == brute_neighbors(&bank, k) {
            nb_ok += 1;
        }
    }

    let mut knn_ok = 0;
    let mut queries = 0;
    while queries < 500 {
        let n = r.random_range(5..=120);
        let d = r.random_range(2..=8);
        let bank = random_bank(&mut r, n, d);
        let classes = r.random_range(2..=5);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let train = LabeledEmbeddings::new(&bank, &labels).unwrap();
        for _ in 0..25 {
            let q = unit(&mut r, d);
            let k = r.random_range(1..=n + 5);
            let tau = TAUS[r.random_range(0..TAUS.len())];
            if weighted_knn_predict(&train, &q, k, tau).unwrap() == brute_knn(&bank, &labels, &q, k.min(n), tau) {
                knn_ok += 1;
            }
            queries += 1;
        }
    }

    let mut ex_ok = 0;
    let mut ex_err = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(2..=40);
        let d = r.random_range(2..=8);
        let bank = random_bank(&mut r, n, d);
        let v = unit(&mut r, d);
        let i = r.random_range(0..n);
        let tau = TAUS[r.random_range(0..TAUS.len())];
        let full = instance_probs(&bank, &v, tau).unwrap();
        let mut kept: Vec<f64> = full.as_slice().to_vec();
        kept.remove(i);
        let z: f64 = kept.iter().sum();
        let oracle: Vec<f64> = kept.iter().map(|p| p / z).collect();
        let got = excluded_probs(&bank, &v, i, tau).unwrap();
        let err = rel_err(got.as_slice(), &oracle);
        ex_err = ex_err.max(err);
        let same_order = |a: &[f64]| {
            let mut idx: Vec<usize> = (0..a.len()).collect();
            idx.sort_by(|x, y| a[*y].total_cmp(&a[*x]).then(x.cmp(y)));
            idx
        };
        if err < 1e-12 && same_order(got.as_slice()) == same_order(&oracle) {
            ex_ok += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = nb_ok == 50 && knn_ok == 500 && ex_ok == 100 && within(elapsed, 30.0);
    verdict(
        "oracle suite",
        pass,
        format!(
            "neighbors {nb_ok}/50 banks, weighted k-NN {knn_ok}/500 queries, excluded softmax {ex_ok}/100 (max rel err {ex_err:.1e}); {:.2}s (< 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn invariant_suite() -> Verdict {
    let mut r = rng(22);
    let mut bank = MemoryBank::init(64, 8, 3).unwrap();
    for _ in 0..1000 {
        let i = r.random_range(0..64);
        let v: Vec<f64> = (0..8).map(|_| r.random_range(-3.0..3.0)).collect();
        let eta = r.random_range(0.01..=1.0);
        bank.ema_update(i, &v, eta).unwrap();
    }
    let norm_err = bank
        .rows()
        .map(|row| (dot(row, row).sqrt() - 1.0).abs())
        .fold(0.0, f64::max);

    let mut sum_err = 0.0f64;
    let mut entropy_ok = true;
    for _ in 0..200 {
        let n = r.random_range(2..=40);
        let d = r.random_range(2..=8);
        let b = random_bank(&mut r, n, d);
        let v = unit(&mut r, d);
        let tau = TAUS[r.random_range(0..TAUS.len())];
        let p = instance_probs(&b, &v, tau).unwrap();
        let ex = excluded_probs(&b, &v, r.random_range(0..n), tau).unwrap();
        for q in [&p, &ex] {
            sum_err = sum_err.max((q.as_slice().iter().sum::<f64>() - 1.0).abs());
            let h = shannon_entropy(q);
            entropy_ok &= h >= 0.0 && h <= (q.len() as f64).ln() + 1e-12;
        }
        let m = r.random_range(1..=6);
        let rs: Vec<_> = (0..m).map(|_| relationship_vector(&b, &unit(&mut r, d)).unwrap()).collect();
        let rh: Vec<_> = (0..m).map(|_| relationship_vector(&b, &unit(&mut r, d)).unwrap()).collect();
        let pairs = augmented_pair_probs(&rs, &rh, tau).unwrap();
        for row in &pairs.offdiag {
            sum_err = sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut aug_ok = true;
    for _ in 0..200 {
        let side = r.random_range(3..=16);
        let im = random_image(&mut r, side, side);
        let out = augment(&im, &mut r, &AugmentPolicy::default()).unwrap();
        aug_ok &= out.data.iter().all(|x| (0.0..=1.0).contains(x)) && out.same_shape(&im);
    }

    let data = tiny_data(10);
    let mut cfg = tiny_config(2, 4);
    cfg.checkpoint_every = 2;
    let mut blobs = Vec::new();
    Trainer::new(data.images(), cfg)
        .unwrap()
        .run(|ev| {
            if let TrainEvent::Checkpoint(s) = ev {
                blobs.push(encode_checkpoint(s));
            }
            Ok(())
        })
        .unwrap();
    let ckpt_ok = !blobs.is_empty()
        && blobs
            .iter()
            .all(|b| encode_checkpoint(&decode_checkpoint(b).unwrap()) == *b);

    let pass = norm_err <= 1e-6 && sum_err <= 1e-9 && entropy_ok && aug_ok && ckpt_ok;
    verdict(
        "invariant suite",
        pass,
        format!(
            "memory norm err {norm_err:.1e} after 1000 EMA updates (<= 1e-6); prob sum err {sum_err:.1e} (<= 1e-9); entropy in [0, ln n]: {entropy_ok}; augmentation in [0,1]: {aug_ok}; checkpoint byte-exact ({} files): {ckpt_ok}",
            blobs.len()
        ),
    )
}

struct DeskRun {
    outcome: TrainOutcome,
    elapsed: Duration,
    accuracy: f64,
    bank_baseline: f64,
    encoder_baseline: f64,
}

fn knn_accuracy(bank: &MemoryBank, train_labels: &[u32], queries: &[Vec<f64>], labels: &[u32]) -> f64 {
    let train = LabeledEmbeddings::new(bank, train_labels).unwrap();
    knn_evaluate(&train, queries, labels, 15, 0.07).unwrap().accuracy
}

fn desk_run(cfg: TrainConfig) -> DeskRun {
    let (train_set, test_set) = desk_data();
    let train_labels = train_set.labels_for_evaluation().unwrap();
    let test_labels = test_set.labels_for_evaluation().unwrap();

    let init = TrainState::new(cfg.clone(), train_set.len(), train_set.image_shape().unwrap()).unwrap();
    let init_queries = embed_images(&init.params, test_set.images()).unwrap();
    let bank_baseline = knn_accuracy(&init.bank, train_labels, &init_queries, test_labels);
    let init_train = MemoryBank::from_rows(&embed_images(&init.params, train_set.images()).unwrap()).unwrap();
    let encoder_baseline = knn_accuracy(&init_train, train_labels, &init_queries, test_labels);

    let start = Instant::now();
    let outcome = train(train_set.images(), cfg).unwrap();
    let elapsed = start.elapsed();
    let queries = embed_images(&outcome.params, test_set.images()).unwrap();
    let accuracy = knn_accuracy(&outcome.bank, train_labels, &queries, test_labels);
    DeskRun {
        outcome,
        elapsed,
        accuracy,
        bank_baseline,
        encoder_baseline,
    }
}

fn desk_learning(run: &DeskRun) -> Verdict {
    let gain = run.accuracy - run.bank_baseline;
    let pass = run.accuracy >= 0.80 && gain >= 0.15 && within(run.elapsed, 300.0);
    verdict(
        "desk-scale learning",
        pass,
        format!(
            "k-NN (k=15) top-1 {:.1}% on 90 held out (>= 80%); random-init baseline {:.1}%, gain {:+.1} pp (>= 15); init-encoder-feature k-NN {:.1}% (reported only); training {:.1}s (< 300s)",
            100.0 * run.accuracy,
            100.0 * run.bank_baseline,
            100.0 * gain,
            100.0 * run.encoder_baseline,
            run.elapsed.as_secs_f64()
        ),
    )
}

fn curriculum_trend(run: &DeskRun) -> Verdict {
    let (train_set, _) = desk_data();
    let labels = train_set.labels_for_evaluation().unwrap();
    let bank = &run.outcome.bank;
    let neighbors = discover_neighbors(bank, 1).unwrap();
    let entropies = instance_entropies(bank, 0.07).unwrap();
    let at = |ratio: f64| {
        let (sel, _) = select_curriculum(&entropies, ratio).unwrap();
        neighborhood_consistency(&neighbors, &sel, labels).unwrap()
    };
    let (c02, c10) = (at(0.2), at(1.0));
    verdict(
        "curriculum trend",
        c02 >= c10 && c10 >= 0.5,
        format!("consistency at ratio 0.2 = {c02:.4} >= at ratio 1.0 = {c10:.4} >= 0.5"),
    )
}

fn ablation_hooks() -> Verdict {
    let mut details = Vec::new();
    let mut pass = true;
    for (label, flag) in [("w = 0", "ue_weight_step = 0"), ("identity augmentation", "augment = false")] {
        let cfg = parse_config(&format!("{DESK_CONFIG}{flag}\n")).unwrap();
        let run = desk_run(cfg);
        let log = &run.outcome.log;
        let complete = log.len() == 60;
        let finite = log
            .iter()
            .all(|e| e.l_and.is_finite() && e.l_ue.is_finite() && e.l_aug.is_finite() && e.l_total.is_finite());
        let components_logged = log.iter().all(|e| e.l_ue > 0.0 && e.l_aug > 0.0);
        let w_zero = flag != "ue_weight_step = 0" || log.iter().all(|e| e.w == 0.0);
        pass &= complete && finite && components_logged && w_zero;
        let last = log.last().unwrap();
        details.push(format!(
            "{label}: {} epochs, final and {:.3} ue {:.3} aug {:.3}, k-NN {:.1}%",
            log.len(),
            last.l_and,
            last.l_ue,
            last.l_aug,
            100.0 * run.accuracy
        ));
    }
    verdict("ablation hooks", pass, details.join("; "))
}

fn schedule_table() -> Verdict {
    let cfg = TrainConfig::default();
    let mut mismatches = 0;
    for epoch in 0..200 {
        let lr = match epoch {
            0..=79 => 0.03,
            80..=119 => 0.003,
            120..=159 => 0.0003,
            _ => 0.00003,
        };
        let w = match epoch {
            0..=79 => 0.0,
            80..=159 => 0.2,
            _ => 0.4,
        };
        if schedules(epoch, &cfg) != (lr, w) {
            mismatches += 1;
        }
    }
    verdict(
        "schedule table",
        mismatches == 0,
        format!("{} of 200 epochs match the closed-form (lr, w) table exactly", 200 - mismatches),
    )
}

fn main() {
    let mut verdicts = vec![gradient_suite(), oracle_suite(), invariant_suite()];
    let run = desk_run(desk_config());
    verdicts.push(desk_learning(&run));
    verdicts.push(curriculum_trend(&run));
    verdicts.push(ablation_hooks());
    verdicts.push(schedule_table());

    println!();
    for v in &verdicts {
        println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
