//! Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any
//! criterion fails. Runs without the libtest harness so the lines are
//! always visible under `cargo test`.

mod common;

use std::time::Instant;

use common::*;
use moetune::analytics::{expert_load_distribution, modality_preference, token_pathways};
use moetune::batch::TokenBatch;
use moetune::objectives::aux_loss;
use moetune::params::ParamGroup;
use moetune::router::{apply_capacity, capacity, decide, select_top_k, RoutingDecision};
use moetune::tuning::{
    advance, evaluate, run_direct_sparse, run_stage, RunConfig, Stage, StageSpec, SyntheticConfig, TunedSubset,
};
use moetune::{count_parameters, ModelConfig, RouterInit, RoutingConfig, Tensor, ToyModel};
use rand::Rng;

const INSTANCES: usize = 1000;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn parameter_counts() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for row in &TABLE_ROWS {
        let c = count_parameters(&model_config(row.file));
        let (act, tot) = (c.activated as f64 / 1e9, c.total as f64 / 1e9);
        let gaps = if row.increment_only {
            vec![((tot - act) - (row.total - row.activated)).abs()]
        } else {
            vec![(act - row.activated).abs(), (tot - row.total).abs()]
        };
        for g in gaps {
            worst = worst.max(g);
            if g >= 0.1 {
                failures.push(row.file);
            }
        }
        if row.increment_only {
            println!(
                "    caveat {}: computed {act:.2}B/{tot:.2}B vs reported {}/{}B; the dense base does not follow \
                 from the listed columns, only the MoE increment is compared",
                row.file, row.activated, row.total
            );
        }
    }
    let main_ok = MAIN_TABLE.iter().all(|m| !failures.contains(m));
    outcome(
        failures.is_empty() && main_ok,
        format!("{} rows, worst gap {worst:.3}B, failing {failures:?}", TABLE_ROWS.len()),
    )
}

fn aux_anchors() -> Outcome {
    let mut worst_uniform: f64 = 0.0;
    let mut exact = true;
    for e in 1..=16 {
        for per_expert in [1, 3, 8] {
            let k = e * per_expert;
            let probs = Tensor::new(vec![k, e], vec![1.0 / e as f64; k * e]).unwrap();
            let argmax: Vec<usize> = (0..k).map(|t| t % e).collect();
            worst_uniform = worst_uniform.max((aux_loss(&probs, &argmax).unwrap() - 1.0).abs());
            let mut one_hot = vec![0.0; k * e];
            (0..k).for_each(|t| one_hot[t * e] = 1.0);
            let concentrated = aux_loss(&Tensor::new(vec![k, e], one_hot).unwrap(), &vec![0; k]).unwrap();
            exact &= concentrated == e as f64;
        }
    }
    outcome(
        worst_uniform <= 1e-12 && exact,
        format!("uniform |L-1| max {worst_uniform:e}, concentrated exactly E: {exact}"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let (mut model, batch) = gradcheck_model_and_batch(3);
    let report = gradcheck_model(&mut model, &batch, 4, &mut rng(4));
    let secs = start.elapsed().as_secs_f64();
    let covered = [
        ParamGroup::Router,
        ParamGroup::Expert,
        ParamGroup::Attention,
        ParamGroup::Projector,
    ]
    .iter()
    .all(|g| report.groups.get(g).copied().unwrap_or(0) > 0);
    outcome(
        report.max_rel < 1e-4 && covered && secs < 60.0,
        format!(
            "{} coordinates ({} skipped at routing boundaries), max rel err {:.2e}, all groups covered: {covered}, {secs:.1}s",
            report.checked, report.skipped, report.max_rel
        ),
    )
}

fn handoff() -> Outcome {
    let cfg = ModelConfig::default();
    let mut worst_scaled: f64 = 0.0;
    let mut worst_equal: f64 = 0.0;
    for (e, k) in [(4, 2), (4, 1), (3, 2), (8, 2), (2, 2), (4, 4)] {
        let dense = ToyModel::build_dense(&cfg, 11).unwrap();
        let routing = RoutingConfig::new(e, k, e as f64 / k as f64).unwrap();
        let moe = dense.expand_to_moe(routing, RouterInit::Zeros, 11).unwrap();
        let input = tiny_input(&cfg, 11, 2, 8);
        let got = moe.logits(&input, None).unwrap();
        let reference = scaled_parent(&dense, &moe.moe_blocks(), k as f64 / e as f64);
        worst_scaled = worst_scaled.max(got.max_abs_diff(&reference.logits(&input, None).unwrap()));
        if k == e {
            worst_equal = worst_equal.max(got.max_abs_diff(&dense.logits(&input, None).unwrap()));
        }
    }
    outcome(
        worst_scaled < 1e-9 && worst_equal < 1e-9,
        format!("k/E-scaled parent gap {worst_scaled:.1e}, k=E gap {worst_equal:.1e}"),
    )
}

fn freezing() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data = SyntheticConfig {
        samples: 64,
        ..cfg.data
    };
    for s in cfg.stages.iter_mut() {
        s.steps = 2;
        s.batch_size = 4;
    }
    let data = cfg.dataset().unwrap();
    let mut violations = Vec::new();
    let mut check = |model: &mut ToyModel, spec: &StageSpec| {
        let before = model.store.clone();
        run_stage(model, spec, &data, cfg.seed, |_| Ok(())).unwrap();
        let trainable = spec.trainable();
        let mut moved = 0;
        for (old, new) in before.entries().iter().zip(model.store.entries()) {
            let same = old.tensor.bit_eq(&new.tensor);
            if !trainable.contains(old.group) && !same {
                violations.push(format!("{} {:?} {}", spec.stage, spec.tuned_subset, old.name));
            }
            moved += usize::from(!same);
        }
        // an expert no token reached keeps its weights; the stage as a whole must still move
        if moved == 0 {
            violations.push(format!("{} {:?} trained nothing", spec.stage, spec.tuned_subset));
        }
    };
    let mut model = ToyModel::build_dense(&cfg.model, cfg.seed).unwrap();
    check(&mut model, cfg.stage(Stage::I).unwrap());
    check(&mut model, cfg.stage(Stage::II).unwrap());
    let subsets = [TunedSubset::Moe, TunedSubset::FfnMoe, TunedSubset::All];
    for subset in subsets {
        let mut moe = model
            .expand_to_moe(cfg.model.routing(), cfg.model.router_init, cfg.seed)
            .unwrap();
        let spec = StageSpec {
            tuned_subset: subset,
            ..cfg.stage(Stage::III).unwrap().clone()
        };
        check(&mut moe, &spec);
    }
    outcome(
        violations.is_empty(),
        format!("stages I, II and III with subsets {subsets:?}; violations {violations:?}"),
    )
}

fn oracles() -> Outcome {
    let mut r = rng(101);
    let mut failures = Vec::new();
    let mut moe_err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let inst = random_instance(&mut r);
        let (store, ens) = build_ensemble(&inst);
        let got = ens
            .forward(&TokenBatch::text(to_tensor(&inst.tokens)), &store, None)
            .unwrap();
        for (t, row) in oracle_moe_forward(&inst).iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                moe_err = moe_err.max((got.hidden.get2(t, j) - w).abs() / w.abs().max(1.0));
            }
        }
    }
    if moe_err >= 1e-12 {
        failures.push("moe_forward");
    }

    let mut top_k_ok = true;
    let mut capacity_ok = true;
    for _ in 0..INSTANCES {
        let e = r.random_range(1..8);
        let k = r.random_range(1..=e);
        let tokens = r.random_range(1..16);
        let c = r.random_range(0.0..2.5);
        let mut decisions: Vec<RoutingDecision> = (0..tokens)
            .map(|_| {
                let probs: Vec<f64> = (0..e).map(|_| r.random_range(0..6) as f64 / 8.0).collect();
                let (selected, gates) = select_top_k(&probs, k);
                top_k_ok &= selected == top_k_scan(&probs, k);
                RoutingDecision {
                    kept: vec![true; k],
                    probs,
                    selected,
                    gates,
                }
            })
            .collect();
        let selected: Vec<Vec<usize>> = decisions.iter().map(|d| d.selected.clone()).collect();
        let gates: Vec<Vec<f64>> = decisions.iter().map(|d| d.gates.clone()).collect();
        apply_capacity(&mut decisions, e, k, c);
        let want = kept_by_rank(&selected, &gates, capacity_of(c, k, tokens, e));
        capacity_ok &= decisions.iter().map(|d| d.kept.clone()).collect::<Vec<_>>() == want;
    }
    if !top_k_ok {
        failures.push("select_top_k");
    }
    if !capacity_ok {
        failures.push("apply_capacity");
    }

    let mut aux_err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let k = r.random_range(1..12);
        let e = r.random_range(1..7);
        let probs: Vec<Vec<f64>> = (0..k)
            .map(|_| softmax(&(0..e).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<_>>()))
            .collect();
        let argmax: Vec<usize> = probs.iter().map(|p| top_k_scan(p, 1)[0]).collect();
        let want = oracle_aux(&probs, &argmax);
        aux_err = aux_err.max((aux_loss(&to_tensor(&probs), &argmax).unwrap() - want).abs() / want.abs().max(1.0));
    }
    if aux_err >= 1e-12 {
        failures.push("aux_loss");
    }

    let mut loads_ok = true;
    let mut prefs_ok = true;
    for _ in 0..INSTANCES {
        let e = r.random_range(1..7);
        let k = r.random_range(1..=e);
        let tokens = r.random_range(1..30);
        let layers = r.random_range(1..4);
        let trace = random_trace(&mut r, layers, tokens, e, k);
        let counts = count_trace(&trace);
        for ((loads, prefs), (top1, text, image)) in expert_load_distribution(&trace)
            .iter()
            .zip(modality_preference(&trace))
            .zip(counts)
        {
            loads_ok &= *loads == top1.iter().map(|&c| c as f64 / tokens as f64).collect::<Vec<_>>();
            for i in 0..e {
                let n = text[i] + image[i];
                prefs_ok &= match prefs[i] {
                    None => n == 0,
                    Some(p) => {
                        p.assigned == n && p.text == text[i] as f64 / n as f64 && p.image == image[i] as f64 / n as f64
                    }
                };
            }
        }
    }
    if !loads_ok {
        failures.push("expert_load_distribution");
    }
    if !prefs_ok {
        failures.push("modality_preference");
    }
    outcome(
        failures.is_empty(),
        format!(
            "6 ops x {INSTANCES} instances; moe rel err {moe_err:.1e}, aux rel err {aux_err:.1e}, mismatches {failures:?}"
        ),
    )
}

fn training_behaviour() -> Outcome {
    let start = Instant::now();
    let main = RunConfig::load(&configs_dir().join("toy.toml")).unwrap();
    let data = main.dataset().unwrap();
    let eval = main.eval_batches(&data).unwrap();
    let mut model = ToyModel::build_dense(&main.model, main.seed).unwrap();
    for s in [Stage::I, Stage::II] {
        model = advance(&main, model, s, &data, |_| Ok(())).unwrap().0;
    }
    let mut sparse = model
        .expand_to_moe(main.model.routing(), main.model.router_init, main.seed)
        .unwrap();
    let initial = evaluate(&sparse, &eval).unwrap().regressive;
    let steps = main.stage(Stage::III).unwrap().steps;
    run_stage(&mut sparse, main.stage(Stage::III).unwrap(), &data, main.seed, |_| {
        Ok(())
    })
    .unwrap();
    let fin = evaluate(&sparse, &eval).unwrap().regressive;
    let ratio = fin / initial;
    let main_ok = ratio <= 0.5 && steps <= 500;

    let compare = RunConfig::load(&configs_dir().join("toy-compare.toml")).unwrap();
    let (mut alpha_wins, mut staged_wins) = (0, 0);
    let seeds = 5;
    for seed in 0..seeds {
        let cfg = RunConfig {
            seed,
            ..compare.clone()
        };
        let data = cfg.dataset().unwrap();
        let eval = cfg.eval_batches(&data).unwrap();
        let mut dense = ToyModel::build_dense(&cfg.model, seed).unwrap();
        for s in [Stage::I, Stage::II] {
            dense = advance(&cfg, dense, s, &data, |_| Ok(())).unwrap().0;
        }
        let expanded = dense
            .expand_to_moe(cfg.model.routing(), cfg.model.router_init, seed)
            .unwrap();
        let mut stats = Vec::new();
        for alpha in [0.01, 0.0] {
            let mut m = expanded.clone();
            m.config.alpha = alpha;
            run_stage(&mut m, cfg.stage(Stage::III).unwrap(), &data, seed, |_| Ok(())).unwrap();
            stats.push(evaluate(&m, &eval).unwrap());
        }
        let (direct, _) = run_direct_sparse(&cfg, &data, |_| Ok(())).unwrap();
        let direct = evaluate(&direct, &eval).unwrap();
        alpha_wins += usize::from(stats[0].max_load < stats[1].max_load);
        staged_wins += usize::from(stats[0].regressive <= direct.regressive);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        main_ok && alpha_wins >= 4 && staged_wins >= 4 && secs < 600.0,
        format!(
            "stage-III eval loss {initial:.3} -> {fin:.3} (ratio {ratio:.2}) in {steps} steps; \
             alpha lowers max load in {alpha_wins}/{seeds} seeds; staged <= direct sparse in {staged_wins}/{seeds} seeds; {secs:.0}s"
        ),
    )
}

fn capacity_monotonicity() -> Outcome {
    let mut r = rng(202);
    let factors = [0.1, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0];
    let (mut monotone, mut zero_at_slack, mut bounded) = (true, true, true);
    for _ in 0..INSTANCES {
        let e = r.random_range(1..9);
        let k = r.random_range(1..=e);
        let tokens = r.random_range(1..40);
        let probs: Vec<Vec<f64>> = (0..tokens)
            .map(|_| softmax(&(0..e).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>()))
            .collect();
        let p = to_tensor(&probs);
        let slack = e as f64 / k as f64;
        let mut grid: Vec<f64> = factors.to_vec();
        grid.extend([slack, slack * 1.5]);
        grid.sort_by(f64::total_cmp);
        let mut last = f64::INFINITY;
        for c in grid {
            let mut d = decide(&p, k).unwrap();
            let report = apply_capacity(&mut d, e, k, c);
            let rate = report.drop_rate();
            monotone &= rate <= last;
            last = rate;
            if c >= slack {
                zero_at_slack &= report.dropped == 0;
            }
            let cap = capacity(c, k, tokens, e);
            let mut kept = vec![0usize; e];
            for x in &d {
                x.selected
                    .iter()
                    .zip(&x.kept)
                    .filter(|(_, &kp)| kp)
                    .for_each(|(&s, _)| kept[s] += 1);
            }
            bounded &= kept.iter().all(|&n| n <= cap) && cap == capacity_of(c, k, tokens, e);
        }
    }
    outcome(
        monotone && zero_at_slack && bounded,
        format!(
            "{INSTANCES} batches; non-increasing {monotone}, zero drops at c >= E/k {zero_at_slack}, kept <= floor(c·k·K/E) {bounded}"
        ),
    )
}

fn pathways() -> Outcome {
    let mut r = rng(303);
    let mut disjoint = true;
    let mut worst_cos: f64 = 1.0;
    for _ in 0..20 {
        let trace = two_cluster_trace(&mut r, 3, 60);
        let report = token_pathways(&trace, 10).unwrap();
        disjoint &= report.pathways.len() >= 2 && {
            let (a, b) = (&report.pathways[0].experts, &report.pathways[1].experts);
            a.iter().all(|x| !b.contains(x))
        };
        let rows: Vec<Vec<f64>> = (0..trace.num_tokens())
            .map(|t| {
                trace
                    .layers
                    .iter()
                    .flat_map(|l| l.tokens[t].probs.iter().copied())
                    .collect()
            })
            .collect();
        worst_cos = worst_cos.min(cosine(&report.first_component, &power_iteration(&rows, 1000)).abs());
    }
    outcome(
        disjoint && worst_cos > 0.999,
        format!("20 traces; top-2 pathways disjoint {disjoint}, min |cos| vs power iteration {worst_cos:.6}"),
    )
}

fn main() {
    // `cargo test -- --list` and filters come through here too
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [Criterion; 9] = [
        ("parameter counts", parameter_counts),
        ("aux-loss anchors", aux_anchors),
        ("gradient correctness", gradients),
        ("stage-III handoff", handoff),
        ("freezing contract", freezing),
        ("oracle equivalence", oracles),
        ("desk-scale training", training_behaviour),
        ("capacity monotonicity", capacity_monotonicity),
        ("pathway sanity", pathways),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        println!(
            "{} criterion {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {}/{} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
