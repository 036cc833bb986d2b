use super::*;
use crate::nn::rng::rng_from_seed;
use crate::nn::{finite_diff_check, sample_coords, Adam, AdamConfig, Gradients, Tape};

fn tiny(role: Role) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        model_dim: 8,
        ffn_dim: 6,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 16,
        role,
    }
}

/// Gated draft with every gated parameter randomised so the experts and gates differ.
fn scrambled_gated_draft(seed: u64) -> DraftModel {
    let mut draft = build_gated_draft_from_pretrained(&DraftModel::new(tiny(Role::Draft), seed).unwrap()).unwrap();
    let mut rng = rng_from_seed(seed + 1);
    let blocks: Vec<_> = draft.net().blocks().to_vec();
    for b in blocks {
        if let FeedForward::Gated(g) = b.ffn {
            for id in [g.private.down, g.private.up, g.route_shared, g.route_private] {
                let m = draft.params().get(id);
                let fresh = Matrix::randn(m.rows(), m.cols(), 0.5, &mut rng);
                *draft.params_mut().get_mut(id) = fresh;
            }
        }
    }
    draft
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// `U·silu(V·h)` for one position, in scalars.
fn expert_oracle(h: &[f64], down: &Matrix, up: &Matrix) -> Vec<f64> {
    let z: Vec<f64> = (0..down.rows())
        .map(|j| silu((0..h.len()).map(|k| down.get(j, k) * h[k]).sum()))
        .collect();
    (0..up.rows())
        .map(|i| (0..z.len()).map(|j| up.get(i, j) * z[j]).sum())
        .collect()
}

fn first_gated_block(d: &DraftModel) -> GatedExpertBlock {
    match d.net().blocks()[0].ffn {
        FeedForward::Gated(g) => g,
        FeedForward::Plain(_) => panic!("plain block"),
    }
}

#[test]
fn gated_ffn_matches_scalar_oracle() {
    let draft = scrambled_gated_draft(3);
    let store = draft.params();
    let g = first_gated_block(&draft);
    let h = Matrix::randn(5, 8, 1.0, &mut rng_from_seed(9));
    let (out, gates) = gated_ffn_with_gates(&h, store, &g).unwrap();
    for t in 0..5 {
        let row = h.row(t);
        let us: f64 = row.iter().zip(store.get(g.route_shared).as_slice()).map(|(a, b)| a * b).sum();
        let up: f64 = row.iter().zip(store.get(g.route_private).as_slice()).map(|(a, b)| a * b).sum();
        let mx = us.max(up);
        let (es, ep) = ((us - mx).exp(), (up - mx).exp());
        let (gs, gp) = (es / (es + ep), ep / (es + ep));
        let s = expert_oracle(row, store.get(g.shared.down), store.get(g.shared.up));
        let p = expert_oracle(row, store.get(g.private.down), store.get(g.private.up));
        for i in 0..8 {
            let want = gs * s[i] + gp * p[i];
            assert!((out.get(t, i) - want).abs() < 1e-12, "{} vs {want}", out.get(t, i));
        }
        assert!((gates.get(t, 0) + gates.get(t, 1) - 1.0).abs() < 1e-12);
        assert!(gates.get(t, 0) > 0.0 && gates.get(t, 1) > 0.0);
        assert!((gates.get(t, 0) - gs).abs() < 1e-12);
    }
    let bad = Matrix::zeros(2, 7);
    assert!(matches!(gated_ffn_forward(&bad, store, &g), Err(Error::Shape(_))));
}

#[test]
fn zero_routing_gives_even_gates_and_copy_collapses() {
    let mut draft = scrambled_gated_draft(4);
    let g = first_gated_block(&draft);
    *draft.params_mut().get_mut(g.route_shared) = Matrix::zeros(1, 8);
    *draft.params_mut().get_mut(g.route_private) = Matrix::zeros(1, 8);
    let h = Matrix::randn(3, 8, 1.0, &mut rng_from_seed(1));
    let (out, gates) = gated_ffn_with_gates(&h, draft.params(), &g).unwrap();
    assert!(gates.as_slice().iter().all(|v| *v == 0.5));
    let store = draft.params();
    for t in 0..3 {
        let s = expert_oracle(h.row(t), store.get(g.shared.down), store.get(g.shared.up));
        let p = expert_oracle(h.row(t), store.get(g.private.down), store.get(g.private.up));
        for i in 0..8 {
            assert!((out.get(t, i) - 0.5 * (s[i] + p[i])).abs() < 1e-12);
        }
    }

    // Private expert equal to the shared one: gates no longer matter.
    let mut draft = scrambled_gated_draft(5);
    let g = first_gated_block(&draft);
    for (from, to) in [(g.shared.down, g.private.down), (g.shared.up, g.private.up)] {
        let v = draft.params().get(from).clone();
        *draft.params_mut().get_mut(to) = v;
    }
    let store = draft.params();
    let out = gated_ffn_forward(&h, store, &g).unwrap();
    for t in 0..3 {
        let s = expert_oracle(h.row(t), store.get(g.shared.down), store.get(g.shared.up));
        for i in 0..8 {
            assert!((out.get(t, i) - s[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn gated_draft_starts_at_the_pretrained_model() {
    let plain = DraftModel::new(tiny(Role::Draft), 21).unwrap();
    let mut gated = build_gated_draft_from_pretrained(&plain).unwrap();
    // Non-zero routing must not matter either while private equals shared.
    let g = first_gated_block(&gated);
    *gated.params_mut().get_mut(g.route_shared) = Matrix::randn(1, 8, 1.0, &mut rng_from_seed(2));
    let tokens = [1, 5, 7, 3, 9, 10, 4];
    let a = plain.forward(&tokens).unwrap();
    let b = gated.forward(&tokens).unwrap();
    assert!(a.logits.max_abs_diff(&b.logits) < 1e-10);

    let cfg = plain.config();
    let (m, d) = (cfg.ffn_dim, cfg.model_dim);
    assert_eq!(
        gated.params().scalar_count() - plain.params().scalar_count(),
        cfg.n_layers * (2 * m * d + 2 * d)
    );
    // Non-FFN parameters are carried over verbatim.
    for (_, name, value) in plain.params().iter() {
        if !name.contains(".ffn.") {
            assert_eq!(gated.params().get(gated.params().find(name).unwrap()), value);
        }
    }
    assert!(build_gated_draft_from_pretrained(&gated).is_err());
}

#[test]
fn freeze_masks() {
    let plain = DraftModel::new(tiny(Role::Draft), 2).unwrap();
    let gated = build_gated_draft_from_pretrained(&plain).unwrap();
    let mask = make_freeze_mask(&gated, FreezeMode::Eda).unwrap();
    for (id, name, _) in gated.params().iter() {
        let expect = name.contains(".ffn.private.") || name.contains(".ffn.route_");
        assert_eq!(mask.flags()[id.index()], expect, "{name}");
    }
    assert!(matches!(
        make_freeze_mask(&plain, FreezeMode::Eda),
        Err(Error::Config(_))
    ));
    assert!(make_freeze_mask(&gated, FreezeMode::FullFt).unwrap().flags().iter().all(|f| *f));
    assert!(make_freeze_mask(&gated, FreezeMode::None).unwrap().flags().iter().all(|f| !f));

    let big = build_gated_draft_from_pretrained(&DraftModel::new(ModelConfig::draft_default(), 1).unwrap()).unwrap();
    let cfg = big.config().clone();
    let mask = make_freeze_mask(&big, FreezeMode::Eda).unwrap();
    let (m, d) = (cfg.ffn_dim, cfg.model_dim);
    assert_eq!(mask.trainable_count(big.params()), cfg.n_layers * (2 * m * d + 2 * d));
    assert!(mask.trainable_fraction(big.params()) < 0.4);
}

/// Sum of log-probabilities of the next tokens; an arbitrary smooth objective.
fn objective<'a>(
    net: &Transformer,
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    tokens: &[TokenId],
    flags: &[bool],
) -> crate::nn::Var {
    let out = net.forward_on_tape(tape, store, &tokens[..tokens.len() - 1], flags).unwrap();
    let labels: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    tape.hard_cross_entropy(out.logits, &labels, 1.0).unwrap()
}

#[test]
fn eda_steps_leave_frozen_parameters_bit_identical() {
    let mut draft = scrambled_gated_draft(8);
    let before = draft.params().clone();
    let mask = make_freeze_mask(&draft, FreezeMode::Eda).unwrap();
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 1e-2,
        ..AdamConfig::default()
    });
    let tokens = [1, 4, 6, 8, 3, 2];
    for _ in 0..5 {
        let mut grads = Gradients::for_store(draft.params());
        {
            let mut tape = Tape::new();
            let loss = objective(draft.net(), &mut tape, draft.params(), &tokens, mask.flags());
            tape.backward(loss, 1.0, &mut grads).unwrap();
        }
        adam.step(draft.params_mut(), &grads, mask.flags()).unwrap();
    }
    let mut changed = 0;
    for (id, name, value) in draft.params().iter() {
        if mask.flags()[id.index()] {
            changed += usize::from(value != before.get(id));
        } else {
            assert_eq!(value.as_slice(), before.get(id).as_slice(), "{name} moved");
        }
    }
    assert!(changed > 0);

    let none = make_freeze_mask(&draft, FreezeMode::None).unwrap();
    let snapshot = draft.params().clone();
    let mut grads = Gradients::for_store(draft.params());
    {
        let mut tape = Tape::new();
        let all = vec![true; snapshot.len()];
        let loss = objective(draft.net(), &mut tape, draft.params(), &tokens, &all);
        tape.backward(loss, 1.0, &mut grads).unwrap();
    }
    adam.step(draft.params_mut(), &grads, none.flags()).unwrap();
    for (id, _, value) in draft.params().iter() {
        assert_eq!(value.as_slice(), snapshot.get(id).as_slice());
    }
}

#[test]
fn whole_model_gradients_match_finite_differences() {
    let draft = scrambled_gated_draft(12);
    let tokens = [1, 3, 9, 4, 4, 7, 2];
    let flags = vec![true; draft.params().len()];
    let mut grads = Gradients::for_store(draft.params());
    {
        let mut tape = Tape::new();
        let loss = objective(draft.net(), &mut tape, draft.params(), &tokens, &flags);
        tape.backward(loss, 1.0, &mut grads).unwrap();
    }
    let coords = sample_coords(draft.params(), 200, &mut rng_from_seed(4));
    let mut store = draft.params().clone();
    let net = draft.net();
    let err = finite_diff_check(
        |s| {
            let mut tape = Tape::new();
            let loss = objective(net, &mut tape, s, &tokens, &flags);
            tape.scalar(loss)
        },
        &mut store,
        &grads,
        &coords,
        1e-5,
    );
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn forward_contract() {
    let target = TargetModel::new(tiny(Role::Target), 5).unwrap();
    let one = target.forward(&[1]).unwrap();
    assert_eq!(one.logits.shape(), (1, 11));
    assert_eq!(one.hiddens.shape(), (1, 8));

    let tokens: Vec<TokenId> = vec![1, 3, 5, 7, 9, 2, 4];
    let full = target.forward(&tokens).unwrap();
    for r in 0..full.logits.rows() {
        let p = token_distribution(full.logits.row(r), 1.0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Appending or changing later tokens leaves earlier rows bit-identical.
    let mut longer = tokens.clone();
    longer.push(6);
    let ext = target.forward(&longer).unwrap();
    assert_eq!(ext.logits.slice_rows(0, tokens.len()), full.logits);
    let mut changed = tokens.clone();
    changed[5] = 10;
    let alt = target.forward(&changed).unwrap();
    assert_eq!(alt.logits.slice_rows(0, 5), full.logits.slice_rows(0, 5));
    assert_ne!(alt.logits.row(5), full.logits.row(5));

    assert!(matches!(target.forward(&[1, 11]), Err(Error::Validation(_))));
    assert!(matches!(target.forward(&[1; 17]), Err(Error::Length(_))));
    assert!(matches!(target.forward(&[]), Err(Error::Validation(_))));
    assert!(DraftModel::from_transformer(target.net().clone()).is_err());

    let calls = target.forward_calls();
    target.logits(&[1, 2]).unwrap();
    assert_eq!(target.forward_calls(), calls + 1);
}

#[test]
fn config_validation() {
    let mut c = tiny(Role::Target);
    c.n_heads = 3;
    assert!(matches!(TargetModel::new(c, 0), Err(Error::Config(_))));
    let mut c = tiny(Role::Target);
    c.ffn_dim = 0;
    assert!(c.validate().is_err());
    let mut d = tiny(Role::Draft);
    assert!(ModelConfig::check_pair(&tiny(Role::Target), &d).is_ok());
    d.model_dim = 12;
    assert!(ModelConfig::check_pair(&tiny(Role::Target), &d).is_err());
}

#[test]
fn sampling_rules() {
    let mut rng = rng_from_seed(0);
    assert_eq!(sample_token(&[5.0, 1.0, 1.0], 0.0, &mut rng), 0);
    assert_eq!(sample_token(&[2.0, 2.0, 0.0], 0.0, &mut rng), 0);
    assert_eq!(sample_token(&[0.0, 3.0, 3.0], 0.0, &mut rng), 1);

    let n = 100_000;
    let ones = (0..n).filter(|_| sample_token(&[0.0, 0.0], 1.0, &mut rng) == 1).count();
    let sigma = (n as f64 * 0.25).sqrt();
    assert!(((ones as f64) - n as f64 * 0.5).abs() < 3.0 * sigma, "{ones}");

    // Temperature sharpens: T = 0.5 on logits [0, ln 2] gives odds 1:4.
    let p = token_distribution(&[0.0, 2f64.ln()], 0.5);
    assert!((p[1] - 0.8).abs() < 1e-12);
    assert_eq!(token_distribution(&[1.0, 3.0, 2.0], 0.0), vec![0.0, 1.0, 0.0]);
}

#[test]
fn checkpoint_round_trip_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let draft = scrambled_gated_draft(6);
    let path = dir.path().join("draft.ckpt");
    save_draft(&draft, &path, serde_json::json!({"stage": "test"})).unwrap();
    let (back, header) = load_draft(&path).unwrap();
    assert_eq!(header.provenance["stage"], "test");
    assert!(back.net().is_gated());
    for (id, name, value) in draft.params().iter() {
        assert_eq!(back.params().name(id), name);
        assert_eq!(back.params().get(id).as_slice(), value.as_slice());
    }
    let tokens = [1, 2, 3];
    assert_eq!(back.forward(&tokens).unwrap(), draft.forward(&tokens).unwrap());
    assert!(load_target(&path).is_err());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    match load_draft(&path) {
        Err(Error::Format(msg)) => assert!(msg.contains("version 7"), "{msg}"),
        other => panic!("expected format error, got {other:?}"),
    }
    std::fs::write(&path, b"junk").unwrap();
    assert!(load_draft(&path).is_err());
}

#[test]
fn uniform_model_is_flat() {
    let u = UniformModel {
        vocab_size: 4,
        max_seq_len: 8,
    };
    let l = u.logits(&[1, 2, 3]).unwrap();
    assert_eq!(l.shape(), (3, 4));
    assert!(u.logits(&[]).is_err());
}
