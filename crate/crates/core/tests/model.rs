//! Parameter counting, expansion to MoE and whole-model invariants.

mod common;

use common::*;
use moetune::checkpoint;
use moetune::model::FeedForward;
use moetune::params::ParamGroup;
use moetune::{count_parameters, ModelConfig, Placement, RouterInit, RoutingConfig, ToyModel};

fn billions(n: u64) -> f64 {
    n as f64 / 1e9
}

#[test]
fn published_rows_reproduce() {
    for row in &TABLE_ROWS {
        let cfg = model_config(row.file);
        let c = count_parameters(&cfg);
        let inc = billions(c.total - c.activated);
        assert!(
            (inc - (row.total - row.activated)).abs() < 0.1,
            "{} increment {inc}",
            row.file
        );
        if !row.increment_only {
            assert!(
                (billions(c.activated) - row.activated).abs() < 0.1,
                "{} activated {}",
                row.file,
                c.activated
            );
            assert!(
                (billions(c.total) - row.total).abs() < 0.1,
                "{} total {}",
                row.file,
                c.total
            );
        }
    }
}

#[test]
fn dense_configs_count_equal() {
    for stem in ["phi2-2.7b", "qwen-1.8b", "stablelm-1.6b", "openchat-7b"] {
        let c = count_parameters(&model_config(stem));
        assert_eq!(c.activated, c.total);
    }
}

#[test]
fn increment_identity() {
    for row in &TABLE_ROWS {
        let cfg = model_config(row.file);
        let c = count_parameters(&cfg);
        let (w, ffn) = (cfg.width as u64, (cfg.ffn_size * cfg.ffn_factor) as u64);
        let m = cfg.moe_layer_count() as u64;
        let e_minus_k = (cfg.experts - cfg.top_k) as u64;
        assert_eq!(
            c.total - c.activated,
            m * e_minus_k * (w * ffn + 2 * w) + m * w * e_minus_k
        );
    }
}

#[test]
fn buffer_walk_matches_closed_form() {
    for placement in Placement::SPARSE.iter().copied().chain([Placement::Dense]) {
        for (e, k, factor) in [(4, 2, 2), (3, 1, 3), (1, 1, 2), (5, 5, 3)] {
            let cfg = ModelConfig {
                placement,
                experts: if placement == Placement::Dense { 1 } else { e },
                top_k: if placement == Placement::Dense { 1 } else { k },
                ffn_factor: factor,
                ..tiny_config()
            };
            let built = ToyModel::build(&cfg, 0).unwrap();
            assert_eq!(
                built.lm_parameter_count(),
                count_parameters(&cfg),
                "{placement:?} E{e} k{k}"
            );
            if placement != Placement::Dense {
                let expanded = ToyModel::build_dense(&cfg, 0)
                    .unwrap()
                    .expand_to_moe(cfg.routing(), RouterInit::Zeros, 0)
                    .unwrap();
                assert_eq!(expanded.lm_parameter_count(), count_parameters(&cfg));
            }
        }
    }
}

#[test]
fn expansion_copies_ffn_bitwise_and_zeroes_router() {
    let cfg = tiny_config();
    let dense = ToyModel::build_dense(&cfg, 4).unwrap();
    let moe = dense.expand_to_moe(cfg.routing(), RouterInit::Zeros, 4).unwrap();
    for b in moe.moe_blocks() {
        let (FeedForward::Dense(parent), FeedForward::Sparse(ens)) = (&dense.blocks[b].ffn, &moe.blocks[b].ffn) else {
            panic!("block {b} layout");
        };
        for expert in &ens.experts {
            for (x, y) in parent.tensors(&dense.store).iter().zip(expert.tensors(&moe.store)) {
                assert!(x.bit_eq(&y));
            }
        }
        assert!(moe.store.get(ens.router.weight).values().iter().all(|&v| v == 0.0));
    }
    // everything outside the ensembles is carried over verbatim
    for e in moe.store.entries() {
        if !matches!(e.group, ParamGroup::Expert | ParamGroup::Router) {
            let id = dense.store.find(&e.name).unwrap();
            assert!(dense.store.get(id).bit_eq(&e.tensor), "{}", e.name);
        }
    }
}

fn handoff_gap(e: usize, k: usize, seed: u64) -> f64 {
    let cfg = tiny_config();
    let dense = ToyModel::build_dense(&cfg, seed).unwrap();
    let routing = RoutingConfig::new(e, k, e as f64 / k as f64).unwrap();
    let moe = dense.expand_to_moe(routing, RouterInit::Zeros, seed).unwrap();
    let reference = scaled_parent(&dense, &moe.moe_blocks(), k as f64 / e as f64);
    let input = tiny_input(&cfg, seed, 3, 5);
    moe.logits(&input, None)
        .unwrap()
        .max_abs_diff(&reference.logits(&input, None).unwrap())
}

#[test]
fn handoff_scales_moe_layers_by_k_over_e() {
    for (e, k) in [(4, 2), (4, 1), (3, 2), (8, 2)] {
        assert!(handoff_gap(e, k, 7) < 1e-9, "E{e} k{k}");
    }
}

#[test]
fn handoff_with_k_equal_e_matches_parent() {
    for e in [2, 3, 4] {
        let cfg = tiny_config();
        let dense = ToyModel::build_dense(&cfg, 2).unwrap();
        let routing = RoutingConfig::new(e, e, 1.0).unwrap();
        let moe = dense.expand_to_moe(routing, RouterInit::Zeros, 2).unwrap();
        let input = tiny_input(&cfg, 2, 2, 6);
        let gap = moe
            .logits(&input, None)
            .unwrap()
            .max_abs_diff(&dense.logits(&input, None).unwrap());
        assert!(gap < 1e-9, "E{e}: {gap}");
    }
}

#[test]
fn single_expert_is_exactly_the_parent() {
    let cfg = tiny_config();
    let dense = ToyModel::build_dense(&cfg, 9).unwrap();
    let moe = dense
        .expand_to_moe(RoutingConfig::new(1, 1, 1.0).unwrap(), RouterInit::Zeros, 9)
        .unwrap();
    let input = tiny_input(&cfg, 9, 2, 4);
    assert!(moe
        .logits(&input, None)
        .unwrap()
        .bit_eq(&dense.logits(&input, None).unwrap()));
}

#[test]
fn dense_placement_ignores_expert_settings() {
    let base = ModelConfig {
        placement: Placement::Dense,
        experts: 1,
        top_k: 1,
        ..tiny_config()
    };
    let other = ModelConfig {
        capacity_factor: 0.5,
        alpha: 0.3,
        router_init: RouterInit::Normal { std: 1.0 },
        ..base.clone()
    };
    let input = tiny_input(&base, 1, 2, 4);
    let a = ToyModel::build(&base, 3).unwrap().logits(&input, None).unwrap();
    let b = ToyModel::build(&other, 3).unwrap().logits(&input, None).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn logits_are_deterministic() {
    let cfg = ModelConfig {
        router_init: RouterInit::Normal { std: 0.3 },
        ..tiny_config()
    };
    let input = tiny_input(&cfg, 5, 2, 4);
    let a = ToyModel::build(&cfg, 5).unwrap().logits(&input, None).unwrap();
    let b = ToyModel::build(&cfg, 5).unwrap().logits(&input, None).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn expert_compute_depends_on_k_not_e() {
    let mut macs = Vec::new();
    for e in [2, 4, 8] {
        let cfg = ModelConfig {
            experts: e,
            top_k: 2,
            capacity_factor: e as f64 / 2.0,
            router_init: RouterInit::Normal { std: 0.7 },
            ..tiny_config()
        };
        let model = ToyModel::build(&cfg, 1).unwrap();
        let input = tiny_input(&cfg, 1, 2, 5);
        let mut tape = moetune::autodiff::Tape::new();
        let mut bind = moetune::params::Bindings::frozen();
        macs.push(
            model
                .forward_on(&mut tape, &mut bind, &input, None)
                .unwrap()
                .expert_macs(),
        );
    }
    assert!(macs.windows(2).all(|w| w[0] == w[1]), "{macs:?}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = ModelConfig {
        router_init: RouterInit::Normal { std: 0.2 },
        ..tiny_config()
    };
    let model = ToyModel::build(&cfg, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &model, Some("III")).unwrap();
    let (back, meta) = checkpoint::load(&path).unwrap();
    assert_eq!(meta.stage.as_deref(), Some("III"));
    assert!(meta.sparse);
    assert_eq!(back.config, model.config);
    for (a, b) in model.store.entries().iter().zip(back.store.entries()) {
        assert_eq!(a.name, b.name);
        assert!(a.tensor.bit_eq(&b.tensor));
    }
    let dense = ToyModel::build_dense(&cfg, 8).unwrap();
    let mut bytes = Vec::new();
    checkpoint::write_to(&mut bytes, &dense, None).unwrap();
    let (back, meta) = checkpoint::read_from(bytes.as_slice()).unwrap();
    assert!(!meta.sparse);
    assert_eq!(back.store, dense.store);
    bytes.truncate(bytes.len() - 3);
    assert!(checkpoint::read_from(bytes.as_slice()).is_err());
}

#[test]
fn forward_rejects_bad_input() {
    let cfg = tiny_config();
    let model = ToyModel::build(&cfg, 0).unwrap();
    let mut input = tiny_input(&cfg, 0, 1, 4);
    input.text[0] = cfg.embedding_size;
    assert!(model.logits(&input, None).is_err());
    let long = tiny_input(&cfg, 0, 1, cfg.max_seq_len);
    assert!(model.logits(&long, None).is_err());
}

#[test]
fn config_files_parse_and_reject_unknown_fields() {
    assert!(ModelConfig::from_toml_str("width = 4\nbogus = 1").is_err());
    for row in &TABLE_ROWS {
        let cfg = model_config(row.file);
        assert_eq!(Some(cfg.moe_layer_count()), cfg.moe_layers.or(Some(0)));
    }
}
