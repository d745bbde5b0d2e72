mod common;

use clustr_core::attention::{AttentionSpec, Session};
use clustr_core::model::{
    build_model, count_params, load_checkpoint, save_checkpoint, overlapped_patch_embed, transformer_block, BlockWeights, ModelConfig, PatchEmbed, PatchEmbedConfig,
    LAMBDA_SCHEDULE,
};
use clustr_core::numerics::gradcheck::all_params;
use clustr_core::numerics::{finite_diff_gradcheck, ops, Coverage, ParamStore, Tensor};
use common::{on_graph, rand_tensor, rng, weighted_sum};

const SEEDS: [u64; 3] = [0, 1, 2];

/// Replaces every parameter with O(1) random values; gains are centered on 1.
fn randomize(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.tensor.shape().to_vec())).collect();
    for (id, name, shape) in ids {
        let mut t = rand_tensor(&mut r, &shape, std);
        if name.ends_with(".gain") {
            t = t.map(|v| 1.0 + v);
        }
        store.set(id, t).unwrap();
    }
}

#[test]
fn named_variants_follow_the_table() {
    let rows = [
        ("T", [1, 2, 6, 1], [64, 128, 256, 512], [1, 2, 4, 8]),
        ("S", [3, 5, 13, 2], [64, 128, 256, 512], [1, 2, 4, 8]),
        ("B", [3, 5, 18, 3], [64, 128, 320, 512], [1, 2, 5, 8]),
    ];
    for (name, layers, channels, heads) in rows {
        let cfg = ModelConfig::by_name(name).unwrap();
        for i in 0..4 {
            let s = &cfg.stages[i];
            assert_eq!((s.layers, s.channels, s.heads), (layers[i], channels[i], heads[i]), "{name} stage {}", i + 1);
            assert_eq!(s.lambdas, LAMBDA_SCHEDULE[i]);
        }
        assert_eq!(cfg.stage_grids().unwrap(), vec![56, 28, 14, 7]);
    }
    assert_eq!(LAMBDA_SCHEDULE, [&[64.0, 16.0][..], &[16.0, 4.0], &[4.0, 1.0], &[1.0]]);
}

#[test]
fn stage_grids_divide_by_powers_of_two() {
    for res in [32, 64, 96, 224, 256] {
        let grids = ModelConfig::micro().with_resolution(res).stage_grids().unwrap();
        assert_eq!(grids, vec![res / 4, res / 8, res / 16, res / 32]);
    }
}

#[test]
fn micro_parameter_count_closed_form() {
    // (C_in, C, scales, clustered?) per stage; ffn ratio 4, 10 classes.
    let stages = [(3, 16, 2, true), (16, 32, 2, true), (32, 64, 2, true), (64, 128, 1, false)];
    let mut total = 0;
    for (i, &(cin, c, scales, clustered)) in stages.iter().enumerate() {
        let kernel = if i == 0 { 7 } else { 3 };
        let embed = kernel * kernel * cin * c + c + 2 * c;
        let attn = 3 * c * c + scales * c * c + c + if clustered { c } else { 0 };
        let ffn = (c * 4 * c + 4 * c) + (4 * c * c + c);
        let block = 2 * c + attn + 2 * c + ffn;
        total += embed + block;
    }
    total += 2 * 128 + 128 * 10 + 10;
    let model = build_model::<f64>(&ModelConfig::micro(), 0).unwrap();
    assert_eq!(count_params(&model), total);
    assert_eq!(total, 370_394);
}

#[test]
fn zeroed_output_layers_make_blocks_identities() {
    for seed in SEEDS {
        let mut model = build_model::<f64>(&ModelConfig::micro(), seed).unwrap();
        randomize(&mut model.params, seed, 0.5);
        for stage in &model.layout.stages {
            for b in &stage.blocks {
                for id in [b.attn.phi, b.attn.phi_bias, b.fc2.weight, b.fc2.bias] {
                    let shape = model.params.tensor(id).shape().to_vec();
                    model.params.set(id, Tensor::zeros(&shape)).unwrap();
                }
            }
        }
        let grids = model.config.stage_grids().unwrap();
        for (stage, side) in model.layout.stages.iter().zip(grids) {
            let c = stage.blocks[0].spec.channels;
            let z = rand_tensor(&mut rng(seed), &[side * side, c], 2.0);
            for b in &stage.blocks {
                let mut s = Session::new(&model.params);
                let zv = s.graph.input(z.clone()).unwrap();
                let out = transformer_block(&mut s, zv, b, Some((side, side))).unwrap();
                assert!(s.graph.value(out).max_abs_diff(&z) <= 1e-12);
            }
        }
    }
}

#[test]
fn block_gradients() {
    for seed in SEEDS {
        let mut store = ParamStore::<f64>::new(seed);
        let spec = AttentionSpec::new(8, 2, vec![4.0, 1.0]).unwrap();
        let block = BlockWeights::register(&mut store, "blk", spec, 4, 0.02).unwrap();
        randomize(&mut store, seed + 50, 0.4);
        let z = rand_tensor(&mut rng(seed + 60), &[16, 8], 1.0);
        let ids = all_params(&store);
        let rep = finite_diff_gradcheck(&mut store, &ids, 1e-5, Coverage::All, |st, g| {
            on_graph(st, g, |s| {
                let zv = s.graph.input(z.clone())?;
                let y = transformer_block(s, zv, &block, Some((4, 4)))?;
                assert_eq!(s.graph.value(y).shape(), &[16, 8]);
                weighted_sum(&mut s.graph, y, seed)
            })
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "seed {seed}: {rep:?}");
        assert_eq!(rep.params.len(), ids.len());
    }
}

#[test]
fn micro_model_gradients_end_to_end() {
    for seed in SEEDS {
        let mut model = build_model::<f64>(&ModelConfig::micro(), seed).unwrap();
        randomize(&mut model.params, seed + 70, 0.3);
        let batch = rand_tensor(&mut rng(seed + 80), &[2, 32, 32, 3], 1.0);
        let targets = [seed as usize % 10, 7];
        let ids = all_params(&model.params);
        let m = &model;
        let mut store = model.params.clone();
        let rep = finite_diff_gradcheck(&mut store, &ids, 1e-5, Coverage::PerParam(3), |st, g| {
            on_graph(st, g, |s| {
                let logits = m.forward_batch(s, &batch)?;
                s.graph.cross_entropy(logits, &targets)
            })
        })
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "seed {seed}: {rep:?}");
        assert_eq!(rep.params.len(), ids.len());
    }
}

#[test]
fn forward_is_deterministic() {
    for seed in SEEDS {
        let a = build_model::<f64>(&ModelConfig::micro(), seed).unwrap();
        let b = build_model::<f64>(&ModelConfig::micro(), seed).unwrap();
        let img = rand_tensor(&mut rng(seed), &[32, 32, 3], 1.0);
        let mut data = img.data().to_vec();
        data.extend_from_slice(img.data());
        let batch = Tensor::new(vec![2, 32, 32, 3], data).unwrap();
        let la = a.forward(&batch).unwrap();
        assert_eq!(la, b.forward(&batch).unwrap());
        assert_eq!(la, a.forward(&batch).unwrap());
        assert_eq!(la.row(0), la.row(1));
        assert!(la.all_finite());
        let other = build_model::<f64>(&ModelConfig::micro(), seed + 10).unwrap();
        assert_ne!(la, other.forward(&batch).unwrap());
    }
}

#[test]
fn stage_one_embedding_of_224_input() {
    let mut store = ParamStore::<f64>::new(0);
    let embed = PatchEmbed::register(&mut store, "embed", PatchEmbedConfig::for_stage(0, 3, 8), 0.02).unwrap();
    let img = rand_tensor(&mut rng(0), &[224, 224, 3], 1.0);
    let (tokens, grid) = overlapped_patch_embed(&store, &embed, &img).unwrap();
    assert_eq!(grid, (56, 56));
    assert_eq!(tokens.shape(), &[3136, 8]);
}

#[test]
fn pointwise_embedding_is_per_pixel_linear_map() {
    let cfg = PatchEmbedConfig {
        kernel: 1,
        stride: 1,
        padding: 0,
        in_channels: 3,
        out_channels: 3,
    };
    let mut store = ParamStore::<f64>::new(0);
    let embed = PatchEmbed::register(&mut store, "embed", cfg, 0.02).unwrap();
    store.set(embed.proj.weight, Tensor::identity(3)).unwrap();
    let img = rand_tensor(&mut rng(1), &[5, 4, 3], 1.0);
    let (tokens, grid) = overlapped_patch_embed(&store, &embed, &img).unwrap();
    assert_eq!(grid, (5, 4));
    let flat = img.clone().reshape(vec![20, 3]).unwrap();
    let want = ops::layer_norm(&flat, &Tensor::filled(&[3], 1.0), &Tensor::zeros(&[3]), 1e-5).unwrap();
    assert!(tokens.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn toy_resolution_chain() {
    let cfg = ModelConfig::micro().with_resolution(8);
    assert_eq!(&cfg.stage_grids().unwrap()[..2], &[2, 1]);
}

#[test]
fn checkpoint_round_trip_preserves_logits() {
    let dir = tempfile::tempdir().unwrap();
    let model = build_model::<f64>(&ModelConfig::micro(), 4).unwrap();
    save_checkpoint(dir.path(), &model).unwrap();
    let back = load_checkpoint::<f64>(dir.path()).unwrap();
    let batch = rand_tensor(&mut rng(4), &[1, 32, 32, 3], 1.0);
    assert_eq!(model.forward(&batch).unwrap(), back.forward(&batch).unwrap());
}

#[test]
fn custom_configs_are_flagged_not_rejected() {
    let mut cfg = ModelConfig::tiny();
    cfg.stages[2].layers = 2;
    let model = build_model::<f32>(&cfg.with_resolution(64), 0).unwrap();
    assert_eq!(model.warnings.len(), 1);
}
