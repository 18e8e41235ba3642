use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::coeffstream::{concat_streams, validate_sequence};
use crate::vqvae::VqConfig;

fn vq(stream: StreamKind, seed: u64) -> VqVae {
    VqVae::new(
        VqConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            d_ff: 16,
            codebook_size: 8,
            ..VqConfig::for_stream(stream)
        },
        seed,
    )
    .unwrap()
}

fn config(stream: StreamKind, w: usize) -> PredictorConfig {
    PredictorConfig {
        window: w,
        d_model: 8,
        heads: 2,
        blocks: 1,
        d_ff: 16,
        ..PredictorConfig::for_stream(stream)
    }
}

fn audio(t: usize, seed: u64) -> AudioFeatureSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioFeatureSequence {
        mel: Array2::from_shape_simple_fn((t, N_MELS), || rng.gen_range(-8.0..0.0)),
    }
}

fn clip(vq: &VqVae, t: usize, seed: u64) -> TrainClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = vq.config().input_dim;
    let x = Array2::from_shape_simple_fn((t, c), || rng.gen_range(-0.3..0.3));
    TrainClip::prepare(vq, x, audio(t, seed + 1)).unwrap()
}

#[test]
fn tokens_at_clip_start_and_mid_clip() {
    let cfg = config(StreamKind::Head, 3);
    let a = AudioToken(Array1::zeros(3 * N_MELS));
    let t = build_window_tokens(&a, Array2::zeros((0, 8)).view(), &cfg).unwrap();
    assert_eq!(t.motion, Array2::<f64>::zeros((3, 8)));
    assert_eq!(t.len(), 4);

    let latents = Array2::from_shape_fn((10, 8), |(i, j)| (i * 8 + j) as f64);
    let t = build_window_tokens(&a, latents.slice(s![4..7, ..]), &cfg).unwrap();
    assert_eq!(t.motion, latents.slice(s![4..7, ..]));
    let t = build_window_tokens(&a, latents.slice(s![0..1, ..]), &cfg).unwrap();
    assert_eq!(t.motion.row(2), latents.row(0));
    assert_eq!(t.motion.slice(s![..2, ..]), Array2::<f64>::zeros((2, 8)));

    assert!(matches!(
        build_window_tokens(&a, latents.slice(s![0..4, ..]), &cfg),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        build_window_tokens(&AudioToken(Array1::zeros(5)), latents.slice(s![0..1, ..]), &cfg),
        Err(Error::Shape(_))
    ));
}

#[test]
fn roles_and_mask() {
    let cfg = config(StreamKind::Head, 2);
    let t = build_window_tokens(&AudioToken(Array1::zeros(2 * N_MELS)), Array2::zeros((0, 8)).view(), &cfg).unwrap();
    assert_eq!(t.roles(), vec![TokenRole::Audio, TokenRole::Motion, TokenRole::Motion]);
    let m = AttentionMask::from_roles(&t.roles());
    assert_eq!(m.matrix[[0, 0]], f64::NEG_INFINITY);
    assert_eq!(m.matrix.iter().filter(|v| v.is_infinite()).count(), 1);
    let b = AttentionMask::block_diagonal(&t.roles(), 3);
    assert!(b.is_valid());
    assert_eq!(b.matrix[[0, 3]], f64::NEG_INFINITY);
    assert_eq!(b.matrix[[4, 5]], 0.0);
    assert_eq!(b.matrix[[3, 3]], f64::NEG_INFINITY);
}

#[test]
fn realized_attention_respects_mask() {
    let p = Predictor::new(config(StreamKind::Head, 4), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feat = audio(20, 2);
    let windows: Vec<WindowTokens> = (0..5)
        .map(|k| {
            let past = Array2::from_shape_simple_fn((4, 8), || rng.gen_range(-2.0..2.0));
            build_window_tokens(&p.audio_token(&feat, k * 3), past.view(), p.config()).unwrap()
        })
        .collect();
    let maps = p.attention_maps(&windows).unwrap();
    assert_eq!(maps.len(), p.config().blocks);
    for layer in maps {
        for head in layer {
            assert_eq!(head.len(), 5);
            for probs in head {
                assert_eq!(probs.dim(), (5, 5));
                assert_eq!(probs[[0, 0]], 0.0);
                for row in probs.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn blocked_attention_equals_block_diagonal_mask() {
    let p = Predictor::new(config(StreamKind::Head, 3), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let roles = vec![TokenRole::Audio, TokenRole::Motion, TokenRole::Motion, TokenRole::Motion];
    let x = Array2::from_shape_simple_fn((16, 8), || rng.gen_range(-1.0..1.0));
    let mut g = Graph::new();
    let xv = g.constant(x);
    let full = AttentionMask::block_diagonal(&roles, 4);
    let (a, _) = p.stack().forward(&mut g, p.params(), xv, Some(&full.matrix));
    let inner = AttentionMask::from_roles(&roles);
    let (b, _) = p.stack().forward_blocked(&mut g, p.params(), xv, 4, Some(&inner.matrix));
    let diff = (g.value(a) - g.value(b)).mapv(f64::abs);
    assert!(diff.iter().all(|d| *d < 1e-12), "{}", diff.iter().cloned().fold(0.0, f64::max));
}

#[test]
fn batched_windows_equal_single_windows() {
    let p = Predictor::new(config(StreamKind::Head, 3), 2).unwrap();
    let feat = audio(9, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let windows: Vec<WindowTokens> = (0..3)
        .map(|k| {
            let past = Array2::from_shape_simple_fn((3, 8), || rng.gen_range(-1.0..1.0));
            build_window_tokens(&p.audio_token(&feat, k * 3), past.view(), p.config()).unwrap()
        })
        .collect();
    let mut g = Graph::new();
    let f = p.forward_graph(&mut g, &windows);
    let batched = g.value(f.predictions).clone();
    for (k, w) in windows.iter().enumerate() {
        let single = p.masked_attention_forward(w).unwrap();
        let diff = (&batched.slice(s![k * 3..(k + 1) * 3, ..]) - &single).mapv(f64::abs);
        assert!(diff.iter().all(|d| *d < 1e-12));
    }
}

#[test]
fn attention_projection_gradients() {
    let mut p = Predictor::new(config(StreamKind::Head, 3), 4).unwrap();
    let vq = {
        let mut v = vq(StreamKind::Head, 4);
        v.freeze();
        v
    };
    let c = clip(&vq, 8, 5);
    let shell = p.clone();
    let targets: Vec<_> = p
        .params()
        .ids()
        .filter(|id| {
            let n = p.params().name(*id);
            n.contains(".w_q.") || n.contains(".w_k.") || n.contains(".w_v.")
        })
        .collect();
    let mut g = Graph::new();
    let l = p.teacher_forced_graph(&mut g, &vq, &c).unwrap();
    let grads = g.backward(l.total);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-4;
    for _ in 0..10 {
        let id = targets[rng.gen_range(0..targets.len())];
        let (rows, cols) = p.params().get(id).dim();
        let (r, col) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        let eval = |params: &Params| {
            let mut m = shell.clone();
            *m.params_mut() = params.clone();
            let mut g = Graph::new();
            let l = m.teacher_forced_graph(&mut g, &vq, &c).unwrap();
            g.scalar(l.total)
        };
        let orig = p.params().get(id)[[r, col]];
        p.params_mut().get_mut(id)[[r, col]] = orig + h;
        let up = eval(p.params());
        p.params_mut().get_mut(id)[[r, col]] = orig - h;
        let down = eval(p.params());
        p.params_mut().get_mut(id)[[r, col]] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = grads.get(id).unwrap()[[r, col]];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        assert!(err < 1e-3, "{} analytic {an} fd {fd}", p.params().name(id));
    }
}

#[test]
fn substitution_and_zero_baselines() {
    let v = vq(StreamKind::MouthDetail, 7);
    let c = clip(&v, 10, 8);
    let exact = fixed_prediction_loss(&v, &c.latents, &c).unwrap();
    assert_eq!(exact.latent, 0.0);
    let recon = v.decode_latents(&c.latents).unwrap();
    let own: f64 = (&recon - &c.coeffs).mapv(|d| d * d).sum() / c.len() as f64;
    assert!((exact.coefficient - own).abs() < 1e-12);

    let zero = zero_predictor_loss(&v, &c).unwrap();
    let latent_sq: f64 = c.latents.mapv(|z| z * z).sum() / c.len() as f64;
    let dec0 = v.decode_latents(&Array2::zeros(c.latents.raw_dim())).unwrap();
    let coeff_sq: f64 = (&dec0 - &c.coeffs).mapv(|d| d * d).sum() / c.len() as f64;
    assert!((zero.latent - latent_sq).abs() < 1e-12);
    assert!((zero.coefficient - coeff_sq).abs() < 1e-12);
    assert!((zero.total - latent_sq - coeff_sq).abs() < 1e-12);
}

#[test]
fn teacher_forced_loss_contract() {
    let v = vq(StreamKind::Head, 9);
    let p = Predictor::new(config(StreamKind::Head, 4), 9).unwrap();
    let c = clip(&v, 11, 10);
    let l = p.teacher_forced_loss(&v, &c).unwrap();
    assert!(l.total.is_finite() && l.latent >= 0.0 && l.coefficient >= 0.0);
    let (windows, keep) = p.teacher_forced_windows(&c).unwrap();
    assert_eq!(windows.len(), 3);
    assert_eq!(keep, vec![4, 4, 3]);
    assert_eq!(windows[1].motion, c.latents.slice(s![0..4, ..]));
    let short = clip(&v, 7, 11);
    assert!(matches!(p.teacher_forced_loss(&v, &short), Err(Error::Data(_))));

    let overlapping = Predictor::new(
        PredictorConfig {
            train_stride: 2,
            ..config(StreamKind::Head, 4)
        },
        9,
    )
    .unwrap();
    let (windows, keep) = overlapping.teacher_forced_windows(&c).unwrap();
    assert_eq!(windows.len(), 6);
    assert_eq!(keep.iter().sum::<usize>(), 11);
}

#[test]
fn inference_lengths_and_validity() {
    let hv = vq(StreamKind::Head, 12);
    let mv = vq(StreamKind::MouthDetail, 13);
    let w = 3;
    let hp = Predictor::new(config(StreamKind::Head, w), 12).unwrap();
    let mp = Predictor::new(config(StreamKind::MouthDetail, w), 13).unwrap();
    let feat = audio(40, 14);
    for mode in [InferMode::PerFrame, InferMode::PerWindow] {
        for t_out in [1, w - 1, w, 5 * w + 3] {
            let opts = InferOptions { mode, snap: false };
            let (h, m) = infer_streams((&hp, &hv), (&mp, &mv), &feat, t_out, opts).unwrap();
            assert_eq!((h.len(), m.len()), (t_out, t_out));
            let seq = concat_streams("x", &h, &m).unwrap();
            assert!(validate_sequence(&seq).is_valid());
        }
    }
    assert!(matches!(
        autoregressive_infer(&hp, &hv, &feat, 0, InferOptions::default()),
        Err(Error::Parameter(_))
    ));
}

#[test]
fn single_frame_is_first_prediction() {
    let v = vq(StreamKind::Head, 15);
    let p = Predictor::new(config(StreamKind::Head, 4), 15).unwrap();
    let feat = audio(10, 16);
    let y = autoregressive_infer(&p, &v, &feat, 1, InferOptions::default()).unwrap();
    let tokens = build_window_tokens(&p.audio_token(&feat, 0), Array2::zeros((0, 8)).view(), p.config()).unwrap();
    let first = p.masked_attention_forward(&tokens).unwrap();
    let expect = v.decode_latents(&first.slice(s![0..1, ..]).to_owned()).unwrap();
    assert_eq!(y, expect);
}

#[test]
fn window_one_matches_reference_recurrence() {
    let v = vq(StreamKind::Head, 17);
    let p = Predictor::new(config(StreamKind::Head, 1), 17).unwrap();
    let feat = audio(12, 18);
    let got = autoregressive_infer(&p, &v, &feat, 12, InferOptions::default()).unwrap();

    let mut prev = Array2::<f64>::zeros((1, 8));
    let mut latents = Array2::zeros((12, 8));
    for t in 0..12 {
        let tokens = WindowTokens {
            audio: feat.mel.row(t).to_owned(),
            motion: prev.clone(),
        };
        prev = p.masked_attention_forward(&tokens).unwrap();
        latents.row_mut(t).assign(&prev.row(0));
    }
    let want = v.decode_latents(&latents).unwrap();
    assert!((&got - &want).iter().all(|d| d.abs() < 1e-6));
}

#[test]
fn inference_is_deterministic_and_snaps() {
    let v = vq(StreamKind::Head, 19);
    let p = Predictor::new(config(StreamKind::Head, 3), 19).unwrap();
    let feat = audio(15, 20);
    let opts = InferOptions {
        mode: InferMode::PerFrame,
        snap: true,
    };
    let z = autoregressive_latents(&p, &v, &feat, 15, opts).unwrap();
    assert_eq!(z, autoregressive_latents(&p, &v, &feat, 15, opts).unwrap());
    let cb = v.codebook().entries;
    for row in z.rows() {
        assert!(cb.rows().into_iter().any(|e| e == row));
    }
}

#[test]
fn training_smoke_roundtrip_and_determinism() {
    let v = vq(StreamKind::Head, 21);
    let train: Vec<TrainClip> = (0..2).map(|i| clip(&v, 12, 30 + i)).collect();
    let val = vec![clip(&v, 12, 40)];
    let opts = TrainOptions {
        epochs: 2,
        batch_size: 2,
        ..TrainOptions::default()
    };
    let cfg = config(StreamKind::Head, 3);
    let (p, r) = train_predictor(&train, &val, &v, &cfg, &opts, 5).unwrap();
    let (_, r2) = train_predictor(&train, &val, &v, &cfg, &opts, 5).unwrap();
    assert_eq!(r, r2);
    assert_eq!(r.curve.len(), 2);
    assert!(r.final_train.total.is_finite());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    p.save(&path, 5).unwrap();
    let q = Predictor::load(&path).unwrap();
    assert_eq!(q.params(), p.params());
    assert_eq!(q.audio_stats(), p.audio_stats());

    let wrong = PredictorConfig { d_model: 16, ..cfg.clone() };
    assert!(matches!(
        train_predictor(&train, &val, &v, &wrong, &opts, 5),
        Err(Error::Config(_))
    ));
}
