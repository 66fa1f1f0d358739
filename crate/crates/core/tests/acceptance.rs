//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::fs;
use std::time::{Duration, Instant};

use ovaproto::data::{gen_gaussian_mixture, Dataset};
use ovaproto::evaluation::{evaluate, Evaluation};
use ovaproto::experiment::{generate_data, run_pipeline, DataConfig, ExperimentConfig, METRICS_JSON, SCORES_CSV};
use ovaproto::loss::{finite_diff_grad, flat_objective, total_loss_grad, LossConfig, Objective};
use ovaproto::metrics::{aupr, aurc_eaurc, auroc, fpr_at_tpr, ScoreSet};
use ovaproto::model::{init_params, Architecture, InitSpec, ModelParams, ThresholdMode};
use ovaproto::posterior::{argmax, dste_combine, dste_combine_oracle, sigmoid_ova};
use ovaproto::rejection::{decide, unified_branch, Rule, UnifiedBranch, Verdict, DEFAULT_DELTA, DEFAULT_EPS};
use ovaproto::rng::Stream;
use ovaproto::trainer::{train, Phase, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    check(elapsed <= Duration::from_secs(limit_s), || format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn text<E: ToString>(e: E) -> String {
    e.to_string()
}

fn fusion_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = Stream::new(0x7e01);
    let mut worst = 0.0f64;
    for k in 1..=10 {
        for _ in 0..1000 {
            let g: Vec<f64> = (0..k).map(|_| rng.uniform_in(-8.0, 8.0)).collect();
            let fast = dste_combine(&g);
            let slow = dste_combine_oracle(&sigmoid_ova(&g)).map_err(text)?;
            for (a, b) in fast.known.iter().chain([&fast.ood]).zip(slow.known.iter().chain([&slow.ood])) {
                worst = worst.max((a - b).abs());
            }
            worst = worst.max((fast.total() - 1.0).abs());
        }
    }
    check(worst < 1e-12, || format!("max deviation {worst:e}"))?;
    within(start.elapsed(), 5)?;
    Ok(format!("10000 vectors, max deviation {worst:.1e}, {:.2}s", start.elapsed().as_secs_f64()))
}

fn gradient_oracle() -> Outcome {
    let start = Instant::now();
    let objectives = [Objective::Dce, Objective::Ova, Objective::Hybrid, Objective::Ce];
    let modes = [ThresholdMode::ConstantShared, ThresholdMode::LearnableShared, ThresholdMode::LearnablePerClass];
    let mut rng = Stream::new(0x9a4d);
    let mut coords = 0;
    let (mut worst_abs, mut worst_rel) = (0.0f64, 0.0f64);
    for c in 0..20 {
        // Configs 0..12 cover every objective x mode pair once.
        let objective = objectives[c % objectives.len()];
        let mode = modes[(c / objectives.len()) % modes.len()];
        let k = [2, 3, 5][rng.index(3)];
        let ds = gen_gaussian_mixture(k, 3, 2, 0.8, 2.0, c as u64).map_err(text)?;
        let spec = InitSpec {
            arch: Architecture { dim_in: 2, hidden: vec![8], feat_dim: 4, num_classes: k },
            xi: rng.uniform_in(0.2, 2.0),
            mode,
            linear_head: objective == Objective::Ce,
        };
        let mut p: ModelParams = init_params(&spec, &ds, 1000 + c as u64).map_err(text)?;
        // Move away from the initialization so prototypes and thresholds are generic.
        let mut flat = p.flatten();
        for v in &mut flat {
            *v += 0.1 * rng.normal();
        }
        p.set_flat(&flat).map_err(text)?;
        let cfg = LossConfig { objective, beta: rng.uniform(), lambda: rng.uniform_in(0.0, 0.5) };
        let (_, grad) = total_loss_grad(&p, &ds, &cfg).map_err(text)?;
        let analytic = grad.flatten(mode);
        let numeric = finite_diff_grad(flat_objective(&p, &ds, &cfg), &p.flatten(), 1e-5);
        check(analytic.len() == numeric.len(), || "gradient length mismatch".into())?;
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - n).abs();
            coords += 1;
            worst_abs = worst_abs.max(err);
            if err > 1e-8 {
                let rel = err / a.abs().max(n.abs());
                worst_rel = worst_rel.max(rel);
                check(rel < 1e-4, || format!("config {c} ({objective:?}, {mode:?}, K={k}) coord {i}: {a} vs {n}"))?;
            }
        }
    }
    within(start.elapsed(), 60)?;
    Ok(format!(
        "20 configs, {coords} coordinates, worst absolute error {worst_abs:.1e}, worst relative error above the floor {worst_rel:.1e}"
    ))
}

fn pairwise_auroc(s: &[f64], pos: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| pos[i]) {
        for j in (0..s.len()).filter(|&j| !pos[j]) {
            pairs += 1.0;
            if s[i] > s[j] {
                wins += 1.0;
            } else if s[i] == s[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// `(tp, fp)` when accepting every score `>= t`.
fn counts_at(s: &[f64], pos: &[bool], t: f64) -> (f64, f64) {
    let mut c = (0.0, 0.0);
    for (&v, &p) in s.iter().zip(pos) {
        if v >= t {
            if p {
                c.0 += 1.0;
            } else {
                c.1 += 1.0;
            }
        }
    }
    c
}

fn distinct_desc(s: &[f64]) -> Vec<f64> {
    let mut t = s.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

fn sweep_aupr(s: &[f64], pos: &[bool]) -> f64 {
    let p = pos.iter().filter(|&&b| b).count() as f64;
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    for t in distinct_desc(s) {
        let (tp, fp) = counts_at(s, pos, t);
        let recall = tp / p;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    area
}

fn sweep_fpr(s: &[f64], pos: &[bool], target: f64) -> f64 {
    let p = pos.iter().filter(|&&b| b).count() as f64;
    let n = s.len() as f64 - p;
    distinct_desc(s)
        .into_iter()
        .map(|t| counts_at(s, pos, t))
        .filter(|&(tp, _)| tp / p >= target)
        .map(|(_, fp)| fp / n)
        .fold(f64::INFINITY, f64::min)
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = Stream::new(0x3e7);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = 2 + rng.index(499);
        // Coarse grids on half the trials so ties are common.
        let levels = if trial % 2 == 0 { 1 + rng.index(12) } else { 0 };
        let scores: Vec<f64> =
            (0..n).map(|_| if levels > 0 { rng.index(levels) as f64 / levels as f64 } else { rng.normal() }).collect();
        let rate = rng.uniform_in(0.05, 0.95);
        let mut pos: Vec<bool> = (0..n).map(|_| rng.uniform() < rate).collect();
        pos[0] = true;
        pos[1] = false;
        let set = ScoreSet::new(scores.clone(), pos.clone()).map_err(text)?;
        let pairs = [
            ("AUROC", auroc(&set).map_err(text)?, pairwise_auroc(&scores, &pos)),
            ("AUPR", aupr(&set).map_err(text)?, sweep_aupr(&scores, &pos)),
            ("FPR95", fpr_at_tpr(&set, 0.95).map_err(text)?, sweep_fpr(&scores, &pos, 0.95)),
        ];
        for (name, a, b) in pairs {
            worst = worst.max((a - b).abs());
            check((a - b).abs() < 1e-10, || format!("trial {trial}, {name}: {a} vs oracle {b}"))?;
        }
        let misd = ScoreSet::for_misd(scores, pos).map_err(text)?;
        let (_, e) = aurc_eaurc(&misd).map_err(text)?;
        check(e >= 0.0, || format!("trial {trial}: E-AURC {e}"))?;
    }
    let hand = ScoreSet::for_misd(vec![4.0, 3.0, 2.0, 1.0], vec![true, true, false, true]).map_err(text)?;
    let (a, e) = aurc_eaurc(&hand).map_err(text)?;
    check((a - 7.0 / 48.0).abs() < 1e-12 && (e - 1.0 / 12.0).abs() < 1e-12, || {
        format!("hand case AURC {a}, E-AURC {e}")
    })?;
    within(start.elapsed(), 30)?;
    Ok(format!("200 sets, max deviation {worst:.1e}, hand case AURC {a:.7} E-AURC {e:.7}"))
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn hybrid_config(seed: u64) -> TrainConfig {
    TrainConfig {
        objective: Objective::Hybrid,
        beta: 0.95,
        lambda_pl: 0.05,
        xi: 2.0,
        epochs: 60,
        seed,
        ..TrainConfig::default()
    }
}

fn run_seed(seed: u64, cfg: &TrainConfig) -> Result<(ModelParams, Evaluation, Dataset, Dataset), String> {
    let (train_set, ind, ood) = generate_data(&DataConfig::default(), seed).map_err(text)?;
    let (model, _) = train(cfg, &train_set).map_err(text)?;
    let ev = evaluate(&model, &ind, &ood, &Rule::ALL, DEFAULT_EPS, DEFAULT_DELTA).map_err(text)?;
    Ok((model, ev, ind, ood))
}

fn synthetic_end_to_end() -> Outcome {
    let start = Instant::now();
    let (mut acc, mut au, mut wins) = (0.0, 0.0, 0);
    let mut detail = Vec::new();
    for seed in SEEDS {
        let (_, ours, _, _) = run_seed(seed, &hybrid_config(seed))?;
        let baseline = TrainConfig { objective: Objective::Ce, ..hybrid_config(seed) };
        let (_, base, _, _) = run_seed(seed, &baseline)?;
        let unified = ours.report.per_rule["unified"].ood.auroc;
        let msp = base.report.per_rule["msp"].ood.auroc;
        acc += ours.report.accuracy / SEEDS.len() as f64;
        au += unified / SEEDS.len() as f64;
        wins += (unified > msp) as usize;
        detail.push(format!("{unified:.4}/{msp:.4}"));
    }
    let summary = format!(
        "mean accuracy {acc:.4}, mean unified AUROC {au:.4}, unified > CE-MSP in {wins}/5 (unified/msp per seed: {}), {:.1}s",
        detail.join(" "),
        start.elapsed().as_secs_f64()
    );
    check(acc >= 0.97 && au >= 0.95 && wins >= 4, || summary.clone())?;
    within(start.elapsed(), 120)?;
    Ok(summary)
}

fn decision_consistency() -> Outcome {
    let (model, _, ind, ood) = run_seed(0, &hybrid_config(0))?;
    let mut posteriors = Vec::new();
    for ds in [&ind, &ood] {
        for i in 0..ds.len() {
            let g = model.logits(ds.row(i)).map_err(text)?;
            posteriors.push(dste_combine(g.as_slice().unwrap()));
        }
    }
    let mut detail = Vec::new();
    // Smaller ε values push samples onto the other branch.
    for eps in [DEFAULT_EPS, 1e-12, 0.0] {
        let (mut mass_branch, mut accepted, mut ood_rej, mut mis_rej) = (0, 0, 0, 0);
        for (n, post) in posteriors.iter().enumerate() {
            let top = argmax(&post.known);
            let rest: f64 = post.known.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, p)| p).sum();
            let expected = if rest < eps { UnifiedBranch::InDistributionMass } else { UnifiedBranch::CalibratedMax };
            check(unified_branch(post, eps) == expected, || format!("eps {eps}: branch mismatch at sample {n}"))?;
            mass_branch += (expected == UnifiedBranch::InDistributionMass) as usize;
            match decide(post, DEFAULT_DELTA, eps).verdict {
                Verdict::Accept(c) => {
                    check(c == top, || format!("accepted class {c} is not the argmax {top}"))?;
                    accepted += 1;
                }
                Verdict::RejectOod => ood_rej += 1,
                Verdict::RejectMisclassification => mis_rej += 1,
            }
        }
        check(accepted + ood_rej + mis_rej == posteriors.len(), || "verdicts do not partition the samples".into())?;
        detail.push(format!("eps {eps:e}: {mass_branch} on the 1-p_ood branch"));
        if eps == DEFAULT_EPS {
            detail.push(format!("verdicts accept {accepted}, ood {ood_rej}, misclassified {mis_rej}"));
        }
    }
    Ok(format!("{} samples; {}", posteriors.len(), detail.join("; ")))
}

fn determinism() -> Outcome {
    let dirs = [tempfile::tempdir().map_err(text)?, tempfile::tempdir().map_err(text)?];
    let mut outputs = Vec::new();
    for dir in &dirs {
        let cfg = ExperimentConfig {
            seed: 0,
            out_dir: dir.path().to_path_buf(),
            train: hybrid_config(0),
            ..Default::default()
        };
        run_pipeline(&cfg).map_err(text)?;
        let read = |name: &str| fs::read(dir.path().join(name)).map_err(text);
        outputs.push((read(METRICS_JSON)?, read(SCORES_CSV)?));
    }
    check(outputs[0] == outputs[1], || "artifacts differ between runs".into())?;
    Ok(format!(
        "metrics.json ({} bytes) and scores.csv ({} bytes) byte-identical",
        outputs[0].0.len(),
        outputs[0].1.len()
    ))
}

fn threshold_ablation() -> Outcome {
    let (train_set, _, _) = generate_data(&DataConfig::default(), 0).map_err(text)?;
    let mut detail = Vec::new();
    for mode in [ThresholdMode::ConstantShared, ThresholdMode::LearnableShared, ThresholdMode::LearnablePerClass] {
        let cfg = TrainConfig { threshold_mode: mode, ..hybrid_config(0) };
        let (model, log) = train(&cfg, &train_set).map_err(|e| format!("{mode:?}: {e}"))?;
        check(model.flatten().iter().all(|v| v.is_finite()), || format!("{mode:?}: non-finite parameters"))?;
        if mode.is_shared() {
            for e in &log.epochs {
                check(e.thresholds.iter().all(|t| t.to_bits() == e.thresholds[0].to_bits()), || {
                    format!("{mode:?}: thresholds differ in epoch {}", e.epoch)
                })?;
            }
        }
        if mode == ThresholdMode::ConstantShared {
            let frozen = log.epochs.iter().rfind(|e| e.phase == Phase::SharedPretrain).unwrap().thresholds[0];
            check(
                log.epochs
                    .iter()
                    .filter(|e| e.phase == Phase::Main)
                    .all(|e| e.thresholds[0].to_bits() == frozen.to_bits()),
                || "constant threshold moved".into(),
            )?;
        }
        let last = log.last().unwrap();
        check(last.train_accuracy >= 0.97, || format!("{mode:?}: final train accuracy {}", last.train_accuracy))?;
        detail.push(format!("{mode:?} train acc {:.3} loss {:.4}", last.train_accuracy, last.loss.total));
    }
    Ok(detail.join("; "))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 closed-form fusion equivalence", fusion_equivalence),
        ("2 gradient oracle", gradient_oracle),
        ("3 metric oracles", metric_oracles),
        ("4 synthetic end-to-end", synthetic_end_to_end),
        ("5 decision/score consistency", decision_consistency),
        ("6 determinism", determinism),
        ("7 threshold-mode ablation", threshold_ablation),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        match run() {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
