use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn small_config() -> DtConfig {
    DtConfig {
        context_k: 6,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        state_dim: 5,
        n_actions: 4,
        max_timestep: 32,
        dropout: 0.1,
    }
}

fn entry(seed: u32, t: usize, prev: Option<usize>, dim: usize) -> ContextEntry {
    ContextEntry {
        return_to_go: 4500 - 7 * i64::from(seed),
        state: (0..dim as u32).map(|j| (seed * 31 + j * 7) % 13).collect(),
        prev_action: prev,
        timestep: t,
    }
}

fn filled_context(cfg: &DtConfig, n: usize, salt: u32) -> AgentContext {
    let mut ctx = AgentContext::new(0, 4500, cfg.context_k);
    for t in 0..n {
        let prev = (t > 0).then(|| (t + salt as usize) % cfg.n_actions);
        ctx.push_entry(entry(t as u32 + salt, t, prev, cfg.state_dim));
    }
    ctx
}

fn obs(values: &[u32]) -> Observation {
    Observation {
        heading_to_storage: values.to_vec(),
        junction_downstream: vec![],
        inventory: vec![],
    }
}

#[test]
fn config_validation() {
    assert!(DtConfig::default().validate().is_ok());
    let bad = DtConfig {
        embed_dim: 10,
        n_heads: 3,
        ..DtConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::Config { field, .. }) if field == "embed_dim"));
    let bad = DtConfig {
        context_k: 0,
        ..DtConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn init_is_seeded_with_zero_head_bias() {
    let a = DtModel::<f32>::init(DtConfig::default(), 9).unwrap();
    let b = DtModel::<f32>::init(DtConfig::default(), 9).unwrap();
    let c = DtModel::<f32>::init(DtConfig::default(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.head.weight.shape(), &[20, 128]);
    assert!(a.head.bias.iter().all(|&v| v == 0.0));
    assert_eq!(a.embed_action.shape(), &[21, 128]);
}

#[test]
fn zero_model_gives_uniform_logits() {
    let cfg = small_config();
    let model = DtModel::<f64>::zeros(cfg.clone()).unwrap();
    let logits = model.forward(&filled_context(&cfg, 3, 1)).unwrap();
    assert!(logits.iter().all(|&l| l == 0.0));
    let p = softmax(&logits);
    assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
}

#[test]
fn rejects_bad_contexts() {
    let cfg = small_config();
    let model = DtModel::<f32>::init(cfg.clone(), 1).unwrap();
    let empty = AgentContext::new(0, 10, cfg.context_k);
    assert!(matches!(model.forward(&empty), Err(Error::Usage(_))));

    let mut long = AgentContext::new(0, 10, cfg.context_k + 3);
    for t in 0..cfg.context_k + 1 {
        long.push_entry(entry(t as u32, t, None, cfg.state_dim));
    }
    assert!(matches!(model.forward(&long), Err(Error::Usage(_))));

    let mut wrong_dim = AgentContext::new(0, 10, cfg.context_k);
    wrong_dim.push_entry(entry(0, 0, None, cfg.state_dim + 1));
    assert!(matches!(model.forward(&wrong_dim), Err(Error::Usage(_))));
}

#[test]
fn causal_mask_hides_later_tuples() {
    let cfg = small_config();
    let model = DtModel::<f64>::init(cfg.clone(), 3).unwrap();
    let full = filled_context(&cfg, 6, 0);
    let base = model.forward_all(&full).unwrap();
    for cut in 1..6 {
        let mut changed = AgentContext::new(0, 0, cfg.context_k);
        for (i, e) in full.entries().enumerate() {
            if i < cut {
                changed.push_entry(e.clone());
            } else {
                changed.push_entry(entry(100 + i as u32, e.timestep, Some(3), cfg.state_dim));
            }
        }
        let other = model.forward_all(&changed).unwrap();
        for row in 0..cut {
            assert_eq!(
                base.row(row),
                other.row(row),
                "row {row} changed at cut {cut}"
            );
        }
        assert_ne!(base.row(cut), other.row(cut));

        let mut prefix = AgentContext::new(0, 0, cfg.context_k);
        for e in full.entries().take(cut) {
            prefix.push_entry(e.clone());
        }
        let short = model.forward_all(&prefix).unwrap();
        for row in 0..cut {
            for (a, b) in base.row(row).iter().zip(short.row(row)) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}

#[test]
fn f32_and_f64_agree() {
    let cfg = small_config();
    let m32 = DtModel::<f32>::init(cfg.clone(), 4).unwrap();
    let m64 = DtModel::<f64>::init(cfg.clone(), 4).unwrap();
    let ctx = filled_context(&cfg, 5, 2);
    let a = m32.forward(&ctx).unwrap();
    let b = m64.forward(&ctx).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((f64::from(*x) - y).abs() < 1e-4, "{x} vs {y}");
    }
}

#[test]
fn greedy_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut logits = vec![0.1f32; 20];
    logits[7] = 2.0;
    assert_eq!(select_action(&logits, SelectionMode::Greedy, &mut rng), 7);
    assert_eq!(
        select_action(&[0.5f64; 20], SelectionMode::Greedy, &mut rng),
        0
    );
    logits[12] = 2.0;
    assert_eq!(select_action(&logits, SelectionMode::Greedy, &mut rng), 7);
}

#[test]
fn cold_sampling_converges_to_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logits: Vec<f64> = (0..20).map(|i| ((i * 7) % 20) as f64 * 0.05).collect();
    let greedy = select_action(&logits, SelectionMode::Greedy, &mut rng);
    let cold = SelectionMode::Sample { temperature: 1e-3 };
    for _ in 0..10_000 {
        assert_eq!(select_action(&logits, cold, &mut rng), greedy);
    }
    let warm = SelectionMode::Sample { temperature: 1.0 };
    let hits = (0..10_000)
        .filter(|_| select_action(&logits, warm, &mut rng) == greedy)
        .count();
    assert!(hits < 10_000);
}

#[test]
fn context_step_updates_return_and_evicts() {
    let mut ctx = AgentContext::new(2, 4550, 20);
    context_step(&mut ctx, &obs(&[1, 2]), None, 0);
    assert_eq!(ctx.entries().next().unwrap().return_to_go, 4550);
    context_step(&mut ctx, &obs(&[1, 2]), Some(4), 3);
    assert_eq!(ctx.current_rtg(), 4547);
    assert_eq!(ctx.entries().last().unwrap().return_to_go, 4547);
    assert_eq!(ctx.entries().last().unwrap().prev_action, Some(4));

    let mut ctx = AgentContext::new(0, 100, 20);
    for i in 0..21u32 {
        context_step(&mut ctx, &obs(&[i]), Some(0), 0);
    }
    assert_eq!(ctx.len(), 20);
    assert_eq!(ctx.steps(), 21);
    assert_eq!(ctx.entries().next().unwrap().state, vec![1]);
    assert_eq!(ctx.entries().next().unwrap().timestep, 1);

    let mut ctx = AgentContext::new(0, 10, 5);
    for r in [4, 0, 6] {
        context_step(&mut ctx, &obs(&[0]), None, r);
    }
    assert_eq!(ctx.current_rtg(), 0);
    context_step(&mut ctx, &obs(&[0]), None, 2);
    assert_eq!(ctx.current_rtg(), -2);
}

#[test]
fn target_return_parsing() {
    assert_eq!(
        "4552".parse::<TargetReturn>().unwrap(),
        TargetReturn::Fixed(4552)
    );
    assert_eq!(
        "auto-median:high".parse::<TargetReturn>().unwrap(),
        TargetReturn::AutoMedian(crate::policies::HeuristicKind::High)
    );
    assert!("auto-median:dt".parse::<TargetReturn>().is_err());
    assert!("lots".parse::<TargetReturn>().is_err());
}

fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
    let first = bytes.iter().position(|&b| b == b'\n').unwrap();
    let second = first + 1 + bytes[first + 1..].iter().position(|&b| b == b'\n').unwrap();
    let mut header: serde_json::Value = serde_json::from_slice(&bytes[first + 1..second]).unwrap();
    edit(&mut header);
    let mut out = bytes[..=first].to_vec();
    out.extend(serde_json::to_vec(&header).unwrap());
    out.extend_from_slice(&bytes[second..]);
    out
}

#[test]
fn weight_bytes_round_trip() {
    let cfg = small_config();
    let mut model = DtModel::<f32>::init(cfg.clone(), 5).unwrap();
    model
        .set_normalization(Normalization {
            state_mean: vec![0.1, 2.5, 1.0 / 3.0, 7.0, 0.0],
            state_std: vec![1.0, 0.7, 3.3, 1e-3, 2.0],
            return_scale: 1e-3,
        })
        .unwrap();
    let bytes = model.to_bytes();
    assert!(bytes.starts_with(b"DTW 1\n"));
    let back = DtModel::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.to_bytes(), bytes);
    let ctx = filled_context(&cfg, 4, 0);
    assert_eq!(back.forward(&ctx).unwrap(), model.forward(&ctx).unwrap());

    let wide = DtModel::<f64>::from_bytes(&bytes).unwrap();
    assert_eq!(wide.to_bytes(), bytes);
}

#[test]
fn weight_errors_name_the_tensor() {
    let cfg = small_config();
    let bytes = DtModel::<f32>::init(cfg, 5).unwrap().to_bytes();

    let wrong_dim = rewrite_header(&bytes, |h| {
        h["config"]["state_dim"] = 6.into();
        h["normalization"]["state_mean"] = serde_json::json!(vec![0.0; 6]);
        h["normalization"]["state_std"] = serde_json::json!(vec![1.0; 6]);
    });
    let err = DtModel::<f32>::from_bytes(&wrong_dim)
        .unwrap_err()
        .to_string();
    assert!(err.contains("embed_state.weight"), "{err}");

    let renamed = rewrite_header(&bytes, |h| h["tensors"][3]["name"] = "embed_state.b".into());
    let err = DtModel::<f32>::from_bytes(&renamed)
        .unwrap_err()
        .to_string();
    assert!(err.contains("embed_state.bias"), "{err}");

    let truncated = &bytes[..bytes.len() - 10];
    let err = DtModel::<f32>::from_bytes(truncated)
        .unwrap_err()
        .to_string();
    assert!(err.contains("head.bias"), "{err}");

    let mut bad_magic = bytes.clone();
    bad_magic[4] = b'2';
    assert!(matches!(
        DtModel::<f32>::from_bytes(&bad_magic),
        Err(Error::Weights(_))
    ));

    let version = rewrite_header(&bytes, |h| h["format_version"] = 2.into());
    assert!(DtModel::<f32>::from_bytes(&version).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_is_normalized(seed in any::<u64>(), n in 1usize..=6, salt in 0u32..1000) {
        let cfg = small_config();
        let model = DtModel::<f32>::init(cfg.clone(), seed).unwrap();
        let logits = model.forward(&filled_context(&cfg, n, salt)).unwrap();
        prop_assert!(logits.iter().all(|l| l.is_finite()));
        let sum: f64 = softmax(&logits).iter().map(|&p| f64::from(p)).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
    }
}
