use super::layers::*;
use super::*;
use crate::numcore::{grad_check, GradCheckOptions, Precision};
use crate::training::cross_entropy;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn tiny_cfg(variant: &str) -> ModelConfig {
    ModelConfig {
        d_hidden: 8,
        d_rel: 6,
        l_lgi: 2,
        l_gcn: 2,
        n_heads_rel: 2,
        n_heads_mha: 2,
        cgmp_variant: variant.to_string(),
        dropout_enc: 0.0,
        dropout_other: 0.0,
        ablation: Ablation::None,
        max_bucket: 4,
    }
}

/// Seven tokens with a two-token aspect: six merged nodes.
fn tiny_sample() -> ParseSample {
    ParseSample {
        tokens: ["the", "food", "was", "really", "good", "thai", "curry"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        heads: vec![Some(1), Some(2), None, Some(4), Some(2), Some(6), Some(4)],
        deprels: ["det", "nsubj", "root", "advmod", "acomp", "amod", "pobj"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        aspect: (5, 7),
        label: 2,
    }
}

fn tiny_model(variant: &str, ablation: Ablation) -> (Model, PreparedSample) {
    let cfg = ModelConfig {
        ablation,
        ..tiny_cfg(variant)
    };
    let sample = tiny_sample();
    let model = Model::from_dataset(cfg, std::slice::from_ref(&sample)).unwrap();
    let prepared = model.prepare(&sample).unwrap();
    (model, prepared)
}

#[test]
fn position_weight_examples() {
    let w = position_weights(5, 3);
    assert_eq!(w[3], 1.0);
    assert!(close(w[0], 0.5, 1e-15), "1 - 3/6 = 0.5, got {}", w[0]);
    // symmetric about tau
    assert_eq!(w[2], w[4]);
    assert!(w.iter().all(|&v| v > 0.0 && v <= 1.0));
}

#[test]
fn pwgcn_isolated_node_is_self_loop_only() {
    use crate::graphs::SyntaxGraph;
    // Two components: node 2 isolated.
    let sg = SyntaxGraph {
        n: 3,
        tau: 0,
        adj: vec![vec![0, 1, 0], vec![1, 0, 0], vec![0, 0, 0]],
    };
    let w_p = vec![1.0; 3];
    let m = pwgcn_matrix(&sg, &w_p);
    // Row 2: degree 0, so only the self entry with divisor 1.
    assert_eq!(&m[6..9], &[0.0, 0.0, 1.0]);
    // Row 0: degree 1, divisor 2 over self and neighbor 1.
    assert_eq!(&m[0..3], &[0.5, 0.5, 0.0]);
}

#[test]
fn pwgcn_two_node_mean_with_identity_weights() {
    use crate::graphs::SyntaxGraph;
    let sg = SyntaxGraph {
        n: 2,
        tau: 0,
        adj: vec![vec![0, 1], vec![1, 0]],
    };
    let m = pwgcn_matrix(&sg, &[1.0, 1.0]);
    let mut store = ParamStore::new();
    let d = 2;
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    store
        .insert("g.w", Tensor::new(vec![d, d], eye).unwrap())
        .unwrap();
    store.insert("g.b", Tensor::zeros(vec![d])).unwrap();
    let mut tape = Tape::new(Precision::F64);
    let h = tape
        .constant_from(vec![2, 2], vec![2.0, -4.0, 6.0, 8.0])
        .unwrap();
    let adj = tape.constant_from(vec![2, 2], m).unwrap();
    let out = layers::pwgcn_layer(&mut tape, &store, "g", h, adj).unwrap();
    // Each row is relu((h_i + h_j) / 2) = relu([4, 2]).
    assert_eq!(tape.value(out), &[4.0, 2.0, 4.0, 2.0]);
}

#[test]
fn pwgcn_uniform_signal_on_regular_graph_gives_equal_rows() {
    use crate::graphs::SyntaxGraph;
    // Triangle: 2-regular.
    let sg = SyntaxGraph {
        n: 3,
        tau: 0,
        adj: vec![vec![0, 1, 1], vec![1, 0, 1], vec![1, 1, 0]],
    };
    let m = pwgcn_matrix(&sg, &[1.0; 3]);
    let mut store = ParamStore::new();
    store
        .insert(
            "g.w",
            Tensor::new(vec![2, 2], vec![0.3, -0.7, 1.1, 0.2]).unwrap(),
        )
        .unwrap();
    store
        .insert("g.b", Tensor::new(vec![2], vec![0.05, -0.02]).unwrap())
        .unwrap();
    let mut tape = Tape::new(Precision::F64);
    let h = tape
        .constant_from(vec![3, 2], vec![1.5, -0.5, 1.5, -0.5, 1.5, -0.5])
        .unwrap();
    let adj = tape.constant_from(vec![3, 3], m).unwrap();
    let y = layers::pwgcn_layer(&mut tape, &store, "g", h, adj).unwrap();
    let v = tape.value(y);
    assert_eq!(&v[0..2], &v[2..4]);
    assert_eq!(&v[0..2], &v[4..6]);
}

fn r2atn_store(d: usize, dr: usize, heads: usize, head_fill: f64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut eye_dr = vec![0.0; dr * dr];
    for i in 0..dr {
        eye_dr[i * dr + i] = 1.0;
    }
    store
        .insert("r.ffn.w1", Tensor::new(vec![dr, dr], eye_dr).unwrap())
        .unwrap();
    store.insert("r.ffn.b1", Tensor::zeros(vec![dr])).unwrap();
    store
        .insert("r.ffn.w2", Tensor::zeros(vec![dr, heads]))
        .unwrap();
    store
        .insert("r.ffn.b2", Tensor::zeros(vec![heads]))
        .unwrap();
    for m in 0..heads {
        let n = d * d;
        store
            .insert(
                format!("r.head{m}.w"),
                Tensor::new(vec![d, d], vec![head_fill; n]).unwrap(),
            )
            .unwrap();
    }
    store
}

#[test]
fn r2atn_identical_relations_give_uniform_attention() {
    // Zero FFN output weights -> equal scores -> uniform alpha. With zero
    // head projections the aggregate is zero, so non-aspect rows survive
    // unchanged (residual) and the aspect row becomes zero.
    let (d, dr, heads) = (2, 3, 2);
    let store = r2atn_store(d, dr, heads, 0.0);
    let mut tape = Tape::new(Precision::F64);
    let h = tape
        .constant_from(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        .unwrap();
    let rel_emb = tape.constant_from(vec![4, 3], vec![0.1; 12]).unwrap();
    let out = layers::relational_attention(
        &mut tape,
        &store,
        "r",
        h,
        rel_emb,
        &[0, 1],
        &[0, 2],
        1,
        heads,
    )
    .unwrap();
    let v = tape.value(out);
    assert_eq!(&v[0..2], &[1.0, 2.0], "non-aspect row 0 unchanged");
    assert_eq!(&v[2..4], &[0.0, 0.0], "aspect row is the (zero) aggregate");
    assert_eq!(&v[4..6], &[5.0, 6.0], "non-aspect row 2 unchanged");
}

#[test]
fn r2atn_hand_scores_give_two_thirds_one_third() {
    // Single head; rel embeddings one-hot; FFN w2 column [ln 2, ln 1]^T so
    // scores are [ln 2, 0] and alpha = [2/3, 1/3].
    let (d, dr, heads) = (2, 2, 1);
    let mut store = ParamStore::new();
    store
        .insert(
            "r.ffn.w1",
            Tensor::new(vec![dr, dr], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
    store.insert("r.ffn.b1", Tensor::zeros(vec![dr])).unwrap();
    store
        .insert(
            "r.ffn.w2",
            Tensor::new(vec![dr, heads], vec![2f64.ln(), 0.0]).unwrap(),
        )
        .unwrap();
    store
        .insert("r.ffn.b2", Tensor::zeros(vec![heads]))
        .unwrap();
    // Identity head projection so the aggregate is the alpha-weighted mean.
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    store
        .insert("r.head0.w", Tensor::new(vec![d, d], eye).unwrap())
        .unwrap();

    let mut tape = Tape::new(Precision::F64);
    // tau = 2; non-aspect rows are 0 and 1 with states [3, 0] and [0, 3].
    let h = tape
        .constant_from(vec![3, 2], vec![3.0, 0.0, 0.0, 3.0, 9.0, 9.0])
        .unwrap();
    let rel_emb = tape
        .constant_from(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])
        .unwrap();
    let out = layers::relational_attention(
        &mut tape,
        &store,
        "r",
        h,
        rel_emb,
        &[0, 1],
        &[0, 1],
        2,
        heads,
    )
    .unwrap();
    let v = tape.value(out);
    // Aggregate = 2/3 * [3,0] + 1/3 * [0,3] = [2, 1] into the aspect row.
    assert!(close(v[4], 2.0, 1e-12) && close(v[5], 1.0, 1e-12), "{v:?}");
    // Non-aspect rows: residual + alpha_i * aggregate.
    assert!(close(v[0], 3.0 + 2.0 / 3.0 * 2.0, 1e-12));
    assert!(close(v[1], 0.0 + 2.0 / 3.0 * 1.0, 1e-12));
    assert!(close(v[2], 0.0 + 1.0 / 3.0 * 2.0, 1e-12));
    assert!(close(v[3], 3.0 + 1.0 / 3.0 * 1.0, 1e-12));
}

#[test]
fn r2atn_rejects_aspect_only_graph() {
    let store = r2atn_store(2, 2, 1, 0.0);
    let mut tape = Tape::new(Precision::F64);
    let h = tape.constant_from(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let rel_emb = tape.constant_from(vec![2, 2], vec![0.0; 4]).unwrap();
    let err = layers::relational_attention(&mut tape, &store, "r", h, rel_emb, &[], &[], 0, 1)
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn fa2c_singleton_and_hand_beta() {
    let mut store = ParamStore::new();
    let d = 2;
    let mut eye = vec![0.0; d * d];
    for i in 0..d {
        eye[i * d + i] = 1.0;
    }
    store
        .insert("a2c.w", Tensor::new(vec![d, d], eye).unwrap())
        .unwrap();
    store.insert("a2c.b", Tensor::zeros(vec![d])).unwrap();

    // Degenerate single row: beta must be [1.0].
    let mut tape = Tape::new(Precision::F64);
    let h1 = tape.constant_from(vec![1, 2], vec![0.3, -0.9]).unwrap();
    let (beta, r) = fa2c_attention(&mut tape, &store, "a2c", h1, 0).unwrap();
    assert_eq!(tape.value(beta), &[1.0]);
    assert_eq!(tape.value(r), &[0.3, -0.9]);

    // Hand case: logits h_i . R_a = [ln 2, 0, 0] -> beta [0.5, 0.25, 0.25].
    let mut tape = Tape::new(Precision::F64);
    let s = 2f64.ln().sqrt();
    let h = tape
        .constant_from(vec![3, 2], vec![s, 0.0, 0.0, 0.0, 0.0, 0.0])
        .unwrap();
    let (beta, _r) = fa2c_attention(&mut tape, &store, "a2c", h, 0).unwrap();
    let b = tape.value(beta);
    assert!(close(b[0], 0.5, 1e-12) && close(b[1], 0.25, 1e-12) && close(b[2], 0.25, 1e-12));
    let sum: f64 = b.iter().sum();
    assert!(close(sum, 1.0, 1e-9));
}

#[test]
fn encoding_single_word_aspect_row_is_projected_embedding() {
    let (model, prepared) = tiny_model("gate", Ablation::None);
    // Rebuild with a single-word aspect over the same tokens.
    let mut sample = tiny_sample();
    sample.aspect = (4, 5);
    let prepared1 = model.prepare(&sample).unwrap();
    let store = model.init_params(3).unwrap();

    let mut tape = Tape::new(Precision::F64);
    let enc = model
        .encode(&mut tape, &store, &prepared1, &mut Mode::Eval)
        .unwrap();
    // Compute the projection of token 4 by hand on the same tape.
    let word_emb = tape.param(&store, "embed.word").unwrap();
    let row = tape
        .gather_rows(word_emb, vec![prepared1.word_ids[4]])
        .unwrap();
    let w = tape.param(&store, "encode.proj.w").unwrap();
    let b = tape.param(&store, "encode.proj.b").unwrap();
    let expect = tape.linear(row, w, Some(b)).unwrap();
    let tau = enc.tau;
    let d = model.cfg.d_hidden;
    let h0 = tape.value(enc.h0);
    assert_eq!(&h0[tau * d..(tau + 1) * d], tape.value(expect));

    // Two-word aspect: row tau is the mean of the two projections.
    let mut tape = Tape::new(Precision::F64);
    let enc2 = model
        .encode(&mut tape, &store, &prepared, &mut Mode::Eval)
        .unwrap();
    let word_emb = tape.param(&store, "embed.word").unwrap();
    let rows = tape
        .gather_rows(word_emb, vec![prepared.word_ids[5], prepared.word_ids[6]])
        .unwrap();
    let w = tape.param(&store, "encode.proj.w").unwrap();
    let b = tape.param(&store, "encode.proj.b").unwrap();
    let proj = tape.linear(rows, w, Some(b)).unwrap();
    let halves = tape.constant_from(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let mean = tape.matmul(halves, proj).unwrap();
    let tau2 = enc2.tau;
    let h0 = tape.value(enc2.h0);
    for (a, e) in h0[tau2 * d..(tau2 + 1) * d].iter().zip(tape.value(mean)) {
        assert!(close(*a, *e, 1e-12));
    }
}

#[test]
fn eval_mode_forward_is_bitwise_deterministic() {
    for variant in ["gate", "mlp", "mha"] {
        let (model, prepared) = tiny_model(variant, Ablation::None);
        let store = model.init_params(7).unwrap();
        let mut t1 = Tape::new(Precision::F64);
        let p1 = model
            .forward(&mut t1, &store, &prepared, &mut Mode::Eval)
            .unwrap();
        let mut t2 = Tape::new(Precision::F64);
        let p2 = model
            .forward(&mut t2, &store, &prepared, &mut Mode::Eval)
            .unwrap();
        let (a, b) = (t1.value(p1), t2.value(p2));
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn probabilities_are_normalized_across_sizes_and_variants() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
    for variant in ["gate", "mlp", "mha"] {
        for n in [2usize, 5, 11, 20] {
            let heads = crate::synth::random_tree(&mut rng, n + 1);
            let sample = ParseSample {
                tokens: (0..n + 1).map(|i| format!("w{i}")).collect(),
                heads,
                deprels: (0..n + 1).map(|_| "dep".to_string()).collect(),
                aspect: (1, 3), // two-word aspect: n+1 tokens -> n nodes
                label: 0,
            };
            let cfg = tiny_cfg(variant);
            let model = Model::from_dataset(cfg, std::slice::from_ref(&sample)).unwrap();
            let prepared = model.prepare(&sample).unwrap();
            let store = model.init_params(1).unwrap();
            let mut tape = Tape::new(Precision::F64);
            let p = model
                .forward(&mut tape, &store, &prepared, &mut Mode::Eval)
                .unwrap();
            assert_eq!(tape.shape(p), &[1, 3]);
            let sum: f64 = tape.value(p).iter().sum();
            assert!(close(sum, 1.0, 1e-9), "{variant} n={n}: sum {sum}");
        }
    }
}

#[test]
fn ablation_parameter_census() {
    let census = |variant: &str, ablation: Ablation| -> Vec<String> {
        let (model, _) = tiny_model(variant, ablation);
        model.param_names()
    };
    for variant in ["gate", "mlp", "mha"] {
        let full = census(variant, Ablation::None);

        let no_syntax = census(variant, Ablation::NoSyntax);
        assert!(no_syntax.iter().all(|n| !n.contains("pwgcn")));

        let no_relation = census(variant, Ablation::NoRelation);
        assert!(no_relation.iter().all(|n| !n.contains("r2atn")));
        assert!(no_relation.iter().all(|n| n != "embed.rel"));

        let no_lgi = census(variant, Ablation::NoLgi);
        assert!(no_lgi
            .iter()
            .all(|n| !n.contains(".y2x.") && !n.contains(".x2y.")));

        let no_fa2c = census(variant, Ablation::NoFa2c);
        assert!(no_fa2c.iter().all(|n| !n.contains("a2c")));

        let syntax_dec = census(variant, Ablation::SyntaxDecoder);
        assert!(syntax_dec.iter().all(|n| n != "decode.wf.w"));
        // Interactive-layer parameters match the full model exactly.
        let lgi_of = |names: &[String]| -> Vec<String> {
            names
                .iter()
                .filter(|n| n.starts_with("lgi"))
                .cloned()
                .collect()
        };
        assert_eq!(lgi_of(&full), lgi_of(&syntax_dec));

        // Each ablation drops parameters relative to full.
        let (m_full, _) = tiny_model(variant, Ablation::None);
        let full_count = m_full.init_params(0).unwrap().total_params();
        for ablation in [
            Ablation::NoSyntax,
            Ablation::NoRelation,
            Ablation::NoLgi,
            Ablation::NoFa2c,
            Ablation::SyntaxDecoder,
            Ablation::RelationDecoder,
        ] {
            let (m, _) = tiny_model(variant, ablation);
            let count = m.init_params(0).unwrap().total_params();
            assert!(
                count < full_count,
                "{variant}/{ablation}: {count} !< {full_count}"
            );
        }
    }
}

#[test]
fn l_lgi_zero_is_a_config_error() {
    let cfg = ModelConfig {
        l_lgi: 0,
        ..tiny_cfg("gate")
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn indivisible_mha_heads_is_a_config_error() {
    let cfg = ModelConfig {
        d_hidden: 9,
        n_heads_mha: 2,
        ..tiny_cfg("mha")
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn lgi_layer_output_equals_igmp_when_other_stream_is_zero() {
    // Gate absorption: zero "other" states make the cross term exactly zero,
    // so the layer output is bitwise the intra-graph term.
    let cfg = tiny_cfg("gate");
    let d = cfg.d_hidden;
    let mut store = ParamStore::new();
    store
        .insert(
            "g.w",
            Tensor::new(vec![2 * d, d], vec![0.123; 2 * d * d]).unwrap(),
        )
        .unwrap();
    let mut tape = Tape::new(Precision::F64);
    let igmp: Vec<f64> = (0..3 * d).map(|i| (i as f64).sin()).collect();
    let x_igmp = tape.constant_from(vec![3, d], igmp.clone()).unwrap();
    let other = tape.constant_from(vec![3, d], vec![0.0; 3 * d]).unwrap();
    let cross = cgmp::lookup("gate")
        .unwrap()
        .apply(&mut tape, &store, "g", x_igmp, other, &cfg)
        .unwrap();
    let out = tape.add(x_igmp, cross).unwrap();
    for (o, e) in tape.value(out).iter().zip(&igmp) {
        assert_eq!(o.to_bits(), e.to_bits());
    }
}

#[test]
fn lgi_layer_degenerates_to_igmp_plus_bias_with_zeroed_mlp() {
    let cfg = tiny_cfg("mlp");
    let d = cfg.d_hidden;
    let mut store = ParamStore::new();
    store.insert("m.w1", Tensor::zeros(vec![2 * d, d])).unwrap();
    store.insert("m.b1", Tensor::zeros(vec![d])).unwrap();
    store.insert("m.w2", Tensor::zeros(vec![d, d])).unwrap();
    let bias: Vec<f64> = (0..d).map(|i| i as f64 * 0.1).collect();
    store
        .insert("m.b2", Tensor::new(vec![d], bias.clone()).unwrap())
        .unwrap();
    let mut tape = Tape::new(Precision::F64);
    let igmp: Vec<f64> = (0..2 * d).map(|i| (i as f64).cos()).collect();
    let x_igmp = tape.constant_from(vec![2, d], igmp.clone()).unwrap();
    let other = tape.constant_from(vec![2, d], vec![0.7; 2 * d]).unwrap();
    let cross = cgmp::lookup("mlp")
        .unwrap()
        .apply(&mut tape, &store, "m", x_igmp, other, &cfg)
        .unwrap();
    let out = tape.add(x_igmp, cross).unwrap();
    for (i, o) in tape.value(out).iter().enumerate() {
        let expect = igmp[i] + bias[i % d];
        assert!((o - expect).abs() < 1e-15);
    }
}

#[test]
fn argmax_tie_break_and_shift_invariance() {
    assert_eq!(argmax(&[0.2, 0.2, 0.2]), 0);
    assert_eq!(argmax(&[0.1, 0.5, 0.4]), 1);
    assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);

    // Adding a constant to pre-softmax logits leaves the prediction alone.
    let mut tape = Tape::new(Precision::F64);
    let logits = vec![0.3, -1.2, 0.8];
    let shifted: Vec<f64> = logits.iter().map(|v| v + 55.5).collect();
    let a = tape.constant_from(vec![1, 3], logits).unwrap();
    let b = tape.constant_from(vec![1, 3], shifted).unwrap();
    let pa = tape.softmax(a, 1).unwrap();
    let pb = tape.softmax(b, 1).unwrap();
    assert_eq!(argmax(tape.value(pa)), argmax(tape.value(pb)));
}

#[test]
fn checkpoint_save_load_round_trip() {
    let (model, prepared) = tiny_model("mlp", Ablation::None);
    let store = model.init_params(5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), &store, Precision::F64).unwrap();
    let (loaded, lstore) = Model::load(dir.path()).unwrap();
    assert_eq!(loaded.cfg, model.cfg);
    assert_eq!(loaded.words, model.words);
    assert_eq!(loaded.relations, model.relations);
    // Same predictions from the reloaded pair.
    let p1 = model.predict(&store, &prepared).unwrap();
    let prepared2 = loaded.prepare(&tiny_sample()).unwrap();
    let p2 = loaded.predict(&lstore, &prepared2).unwrap();
    assert_eq!(p1, p2);
}

/// End-to-end gradients for one variant/ablation pair at n = 6 nodes.
fn check_full_gradients(variant: &str, ablation: Ablation) -> f64 {
    let (model, prepared) = tiny_model(variant, ablation);
    let mut store = model.init_params(11).unwrap();
    let report = grad_check(
        &mut store,
        |tape, s| {
            let p = model.forward(tape, s, &prepared, &mut Mode::Eval)?;
            cross_entropy(tape, p, prepared.label)
        },
        &GradCheckOptions {
            max_coords_per_param: Some(6),
            seed: 42,
            ..Default::default()
        },
    )
    .unwrap();
    report.max_rel_err
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in ["gate", "mlp", "mha"] {
        let err = check_full_gradients(variant, Ablation::None);
        assert!(err < 1e-4, "{variant}: rel err {err}");
    }
}

#[test]
fn ablated_model_gradients_match_finite_differences() {
    // One non-trivial ablation per family; the acceptance suite sweeps all
    // twenty-one combinations.
    for (variant, ablation) in [
        ("gate", Ablation::NoSyntax),
        ("mlp", Ablation::NoLgi),
        ("mha", Ablation::RelationDecoder),
    ] {
        let err = check_full_gradients(variant, ablation);
        assert!(err < 1e-4, "{variant}/{ablation}: rel err {err}");
    }
}
