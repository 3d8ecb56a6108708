use super::*;
use crate::attention::{attention, AttentionParams};
use crate::norms_ffn::{layer_norm_velocity, Activation};
use crate::numerics::{gaussian_init, Prng};

fn random_block(seed: u64, d: usize, heads: usize, variant: Variant, tau: f64) -> BlockParams {
    let mut rng = Prng::new(seed);
    let mut ln = || LayerNormParams {
        gamma: gaussian_init(&mut rng, 1, d, 0.3).map(|v| 1.0 + v),
        beta: gaussian_init(&mut rng, 1, d, 0.3),
        eps: 1e-5,
    };
    let ln1 = ln();
    let ln2 = ln();
    let mut rng = Prng::new(seed + 1000);
    let mut ffn = FfnParams::random(&mut rng, d, 2 * d, 0.4, Activation::Gelu);
    ffn.b1 = gaussian_init(&mut rng, 1, 2 * d, 0.2);
    ffn.b2 = gaussian_init(&mut rng, 1, d, 0.2);
    BlockParams {
        attn: AttentionParams::random(&mut rng, d, heads, 0.5, 0.5),
        ln1,
        ln2,
        ffn,
        step: StepConfig::new(variant, tau).with_theta(Matrix::filled(1, 1, 0.4)),
        wavy: variant != Variant::Diffuse,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

// Element-wise restatement of the wave / blended residual lines.
fn residual_oracle(x: &Matrix, y: &Matrix, att: &Matrix, step: &StepConfig) -> (Matrix, Matrix) {
    let t = step.tau;
    let lam = sigmoid(step.theta.get(0, 0));
    let mut xo = Matrix::zeros(x.rows(), x.cols());
    let mut yo = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let (xv, yv, a) = (x.get(i, j), y.get(i, j), att.get(i, j));
            let (nx, ny) = match step.variant {
                Variant::Wave => {
                    let ny = t * (a - xv) + yv;
                    (t * ny + xv, ny)
                }
                Variant::MixOutput => {
                    let ny = t * (a - xv) + yv;
                    let xw = t * ny + xv;
                    let xd = t * a + (1.0 - t) * xv;
                    (lam * xw + (1.0 - lam) * xd, ny)
                }
                Variant::MixVelocity => {
                    let ny = lam * (t * (a - xv) + yv) + (1.0 - lam) * (a - xv);
                    (t * ny + xv, ny)
                }
                Variant::Diffuse => unreachable!(),
            };
            xo.set(i, j, nx);
            yo.set(i, j, ny);
        }
    }
    (xo, yo)
}

fn post_wavy_oracle(x: &Matrix, y: &Matrix, p: &BlockParams) -> (Matrix, Matrix) {
    let x1 = multi_head_attention(x, &p.attn).unwrap();
    let (x2, y1) = residual_oracle(x, y, &x1, &p.step);
    let x3 = layer_norm(&x2, &p.ln1).unwrap();
    let y2 = layer_norm_velocity(&x2, &y1, &p.ln1).unwrap();
    let x4 = ffn(&x3, &p.ffn).unwrap();
    let y3 = ffn_velocity(&x3, &y2, &p.ffn).unwrap();
    let x5 = x3.add(&x4).unwrap();
    let y4 = y2.add(&y3).unwrap();
    (
        layer_norm(&x5, &p.ln2).unwrap(),
        layer_norm_velocity(&x5, &y4, &p.ln2).unwrap(),
    )
}

fn pre_wavy_oracle(x: &Matrix, y: &Matrix, p: &BlockParams) -> (Matrix, Matrix) {
    let x1 = layer_norm(x, &p.ln1).unwrap();
    let x2 = multi_head_attention(&x1, &p.attn).unwrap();
    let (x3, y2) = residual_oracle(x, y, &x2, &p.step);
    let x4 = layer_norm(&x3, &p.ln2).unwrap();
    let y3 = layer_norm_velocity(&x3, &y2, &p.ln2).unwrap();
    let x5 = ffn(&x4, &p.ffn).unwrap();
    let y4 = ffn_velocity(&x4, &y3, &p.ffn).unwrap();
    (x5.add(&x3).unwrap(), y4.add(&y2).unwrap())
}

#[test]
fn wavy_blocks_match_line_by_line_flows() {
    for (k, variant) in [Variant::Wave, Variant::MixOutput, Variant::MixVelocity].into_iter().enumerate() {
        for tau in [0.1, 0.5, 0.9] {
            let p = random_block(10 + k as u64, 6, 2, variant, tau);
            let mut rng = Prng::new(99);
            let x = gaussian_init(&mut rng, 5, 6, 1.0);
            let y = gaussian_init(&mut rng, 5, 6, 0.5);
            let (gx, gy) = post_ln_wavy_block(&x, &y, &p).unwrap();
            let (ox, oy) = post_wavy_oracle(&x, &y, &p);
            assert!(gx.max_abs_diff(&ox) <= 1e-12 && gy.max_abs_diff(&oy) <= 1e-12, "{variant:?} post");
            let (gx, gy) = pre_ln_wavy_block(&x, &y, &p).unwrap();
            let (ox, oy) = pre_wavy_oracle(&x, &y, &p);
            assert!(gx.max_abs_diff(&ox) <= 1e-12 && gy.max_abs_diff(&oy) <= 1e-12, "{variant:?} pre");
        }
    }
}

#[test]
fn post_wavy_zero_query_key_weights() {
    let mut p = random_block(1, 4, 1, Variant::Wave, 0.5);
    p.attn.heads[0].wq = Matrix::zeros(4, 4);
    p.attn.heads[0].wk = Matrix::zeros(4, 4);
    let mut rng = Prng::new(2);
    let x = gaussian_init(&mut rng, 3, 4, 1.0);
    let y = gaussian_init(&mut rng, 3, 4, 1.0);
    // With uniform A, Attn(X) is the row mean of X Wv projected by Wo.
    let pooled = x.mean_rows().matmul(&p.attn.heads[0].wv).unwrap().matmul(&p.attn.wo).unwrap();
    let att = multi_head_attention(&x, &p.attn).unwrap();
    for r in att.row_iter() {
        for (a, b) in r.iter().zip(pooled.data()) {
            assert!((a - b).abs() <= 1e-14);
        }
    }
    let (gx, gy) = post_ln_wavy_block(&x, &y, &p).unwrap();
    let (ox, oy) = post_wavy_oracle(&x, &y, &p);
    assert!(gx.max_abs_diff(&ox) <= 1e-12 && gy.max_abs_diff(&oy) <= 1e-12);
}

#[test]
fn zero_tau_decouples_attention() {
    let mut p = random_block(3, 4, 2, Variant::Wave, 0.5);
    p.step.tau = 0.0;
    let x = gaussian_init(&mut Prng::new(4), 5, 4, 1.0);
    let y = Matrix::zeros(5, 4);

    let (px, py) = post_ln_wavy_block(&x, &y, &p).unwrap();
    let x3 = layer_norm(&x, &p.ln1).unwrap();
    let want = layer_norm(&x3.add(&ffn(&x3, &p.ffn).unwrap()).unwrap(), &p.ln2).unwrap();
    assert!(px.max_abs_diff(&want) <= 1e-12);
    assert_eq!(py.max_abs(), 0.0);

    let (qx, qy) = pre_ln_wavy_block(&x, &y, &p).unwrap();
    let want = ffn(&layer_norm(&x, &p.ln2).unwrap(), &p.ffn).unwrap().add(&x).unwrap();
    assert!(qx.max_abs_diff(&want) <= 1e-12);
    assert_eq!(qy.max_abs(), 0.0);
}

#[test]
fn single_token_block() {
    let p = random_block(5, 4, 1, Variant::Wave, 0.5);
    let mut rng = Prng::new(6);
    let x = gaussian_init(&mut rng, 1, 4, 1.0);
    let y = gaussian_init(&mut rng, 1, 4, 1.0);
    // A = [[1]] so Attn(X) = X Wv Wo.
    let att = x.matmul(&p.attn.heads[0].wv).unwrap().matmul(&p.attn.wo).unwrap();
    assert!(multi_head_attention(&x, &p.attn).unwrap().max_abs_diff(&att) <= 1e-15);
    let (gx, gy) = post_ln_wavy_block(&x, &y, &p).unwrap();
    let (ox, oy) = post_wavy_oracle(&x, &y, &p);
    assert!(gx.max_abs_diff(&ox) <= 1e-12 && gy.max_abs_diff(&oy) <= 1e-12);
}

#[test]
fn pre_wavy_degenerate_params() {
    let d = 4;
    let mut p = random_block(7, d, 1, Variant::Wave, 0.5);
    p.attn.heads[0].wv = Matrix::zeros(d, d);
    p.ffn.w1 = Matrix::zeros(d, 2 * d);
    p.ffn.w2 = Matrix::zeros(2 * d, d);
    p.ln1 = LayerNormParams::identity(d, 1e-5);
    p.ln2 = LayerNormParams::identity(d, 1e-5);
    let mut rng = Prng::new(8);
    let x = gaussian_init(&mut rng, 3, d, 1.0);
    let y = gaussian_init(&mut rng, 3, d, 1.0);
    let (gx, gy) = pre_ln_wavy_block(&x, &y, &p).unwrap();
    let tau = 0.5;
    let y2 = x.scale(-tau).add(&y).unwrap();
    let x3 = y2.scale(tau).add(&x).unwrap();
    let want = x3.add_row(&p.ffn.b2).unwrap();
    assert!(gx.max_abs_diff(&want) <= 1e-14);
    assert!(gy.max_abs_diff(&y2) <= 1e-14);
}

#[test]
fn standard_blocks() {
    let d = 4;
    let p = random_block(9, d, 2, Variant::Diffuse, 0.5);
    let x = gaussian_init(&mut Prng::new(10), 5, d, 1.0);

    let x1 = multi_head_attention(&x, &p.attn).unwrap();
    let x3 = layer_norm(&x1.add(&x).unwrap(), &p.ln1).unwrap();
    let x5 = x3.add(&ffn(&x3, &p.ffn).unwrap()).unwrap();
    assert!(post_ln_block(&x, &p).unwrap().max_abs_diff(&layer_norm(&x5, &p.ln2).unwrap()) <= 1e-12);

    // Residual passthrough when every sub-layer weight is zero.
    let mut z = p.clone();
    for h in &mut z.attn.heads {
        h.wv = Matrix::zeros(d, h.wv.cols());
    }
    z.ffn.w1 = Matrix::zeros(d, 2 * d);
    z.ffn.w2 = Matrix::zeros(2 * d, d);
    let want = x.add_row(&z.ffn.b2).unwrap();
    assert!(pre_ln_block(&x, &z).unwrap().max_abs_diff(&want) <= 1e-15);
}

#[test]
fn attention_residual_before_ln() {
    // Single head, Wo = I: the residual stage of the Post-LN block is A X Wv + X.
    let d = 4;
    let mut rng = Prng::new(11);
    let attn = AttentionParams::single_head(
        gaussian_init(&mut rng, d, d, 0.5),
        gaussian_init(&mut rng, d, d, 0.5),
        gaussian_init(&mut rng, d, d, 0.5),
    )
    .unwrap();
    let x = gaussian_init(&mut rng, 5, d, 1.0);
    let a = attention_matrix(&x, &attn, 0).unwrap();
    let want = a.apply(&x).unwrap().matmul(&attn.heads[0].wv).unwrap().add(&x).unwrap();
    let got = multi_head_attention(&x, &attn).unwrap().add(&x).unwrap();
    assert!(got.max_abs_diff(&want) <= 1e-12);
    assert!(attention(&x, &attn, 0).unwrap().add(&x).unwrap().max_abs_diff(&want) <= 1e-12);
}

#[test]
fn diffusion_reaction_identity() {
    let d = 5;
    // LN is the identity on already-standardized rows with gamma = 1, beta = 0, eps = 0.
    let mut p = random_block(12, d, 1, Variant::Diffuse, 0.5);
    p.ln1 = LayerNormParams::identity(d, 0.0);
    let raw = gaussian_init(&mut Prng::new(13), 4, d, 1.0);
    let x = layer_norm(&raw, &p.ln1).unwrap();
    assert!(preln_diffusion_reaction_check(&x, &p).unwrap() <= 1e-12);

    for seed in 0..10 {
        let p = random_block(20 + seed, d, 1, Variant::Diffuse, 0.5);
        assert!(p.ln1.beta.max_abs() > 0.0);
        let x = gaussian_init(&mut Prng::new(40 + seed), 6, d, 2.0);
        assert!(preln_diffusion_reaction_check(&x, &p).unwrap() <= 1e-10);
    }

    let multi = random_block(30, 4, 2, Variant::Diffuse, 0.5);
    assert!(preln_diffusion_reaction_check(&Matrix::zeros(2, 4), &multi).is_err());
}

#[test]
fn wavy_residual_rejects_diffuse() {
    let x = Matrix::zeros(2, 2);
    let step = StepConfig::new(Variant::Diffuse, 0.5);
    assert!(wavy_residual(&x, &x, &x, &step).is_err());
}

fn toy_config(variant: Variant, placement: LnPlacement) -> ModelConfig {
    ModelConfig {
        vocab: 7,
        max_len: 6,
        layers: 3,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        ln_placement: placement,
        residual_variant: variant,
        theta_init: 0.3,
        ..ModelConfig::default()
    }
}

fn baseline_stack(tokens: &[usize], m: &ModelParams) -> Matrix {
    let mut x = Matrix::zeros(tokens.len(), m.d_model());
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..m.d_model() {
            x.set(i, j, m.embedding.get(t, j) + m.positional.get(i, j));
        }
    }
    for l in &m.layers {
        x = match m.ln_placement {
            LnPlacement::Post => post_ln_block(&x, l).unwrap(),
            LnPlacement::Pre => pre_ln_block(&x, l).unwrap(),
        };
    }
    if m.ln_placement == LnPlacement::Pre {
        x = layer_norm(&x, &m.final_ln).unwrap();
    }
    x.matmul(&m.head).unwrap()
}

#[test]
fn zero_layer_model() {
    for placement in [LnPlacement::Post, LnPlacement::Pre] {
        let cfg = ModelConfig {
            layers: 0,
            ..toy_config(Variant::Diffuse, placement)
        };
        let m = ModelParams::init(&cfg, 1).unwrap();
        let out = model_forward(&[0, 3, 6], &m).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.logits, baseline_stack(&[0, 3, 6], &m));
    }
}

#[test]
fn non_wavy_stack_equals_baseline_bitwise() {
    for variant in Variant::ALL {
        for placement in [LnPlacement::Post, LnPlacement::Pre] {
            let mut m = ModelParams::init(&toy_config(variant, placement), 2).unwrap();
            for l in &mut m.layers {
                l.wavy = false;
            }
            let tokens = [1, 4, 4, 0, 6];
            let out = model_forward(&tokens, &m).unwrap();
            assert_eq!(out.logits, baseline_stack(&tokens, &m));
            assert_eq!(out.y.max_abs(), 0.0);
        }
    }
}

#[test]
fn partial_wavy_layers_keep_shapes() {
    let all = ModelParams::init(&toy_config(Variant::Wave, LnPlacement::Post), 3).unwrap();
    let cfg = ModelConfig {
        wavy_layers: WavyLayers::last(1, 3),
        ..toy_config(Variant::Wave, LnPlacement::Post)
    };
    let last = ModelParams::init(&cfg, 3).unwrap();
    assert_eq!(last.layers.iter().map(|l| l.wavy).collect::<Vec<_>>(), [false, false, true]);
    let tokens = [2, 5, 1, 1];
    let a = model_forward(&tokens, &all).unwrap();
    let b = model_forward(&tokens, &last).unwrap();
    assert_eq!(a.trace.len(), 4);
    assert_eq!(b.trace.len(), 4);
    for (p, q) in a.trace.iter().zip(&b.trace) {
        assert_eq!(p.shape(), q.shape());
    }
    assert_eq!(a.trace[1].shape(), (4, 8));
    assert_ne!(a.trace[1], b.trace[1]);
    assert_eq!(a.logits.shape(), (4, 7));
    assert_eq!(a.logits.shape(), b.logits.shape());
}

#[test]
fn wavy_model_matches_manual_chain() {
    let m = ModelParams::init(&toy_config(Variant::MixVelocity, LnPlacement::Pre), 4).unwrap();
    let tokens = [3, 3, 0];
    let mut x = model_forward(&tokens, &m).unwrap().trace[0].clone();
    let mut y = Matrix::zeros(3, 8);
    for l in &m.layers {
        let (nx, ny) = pre_wavy_oracle(&x, &y, l);
        x = nx;
        y = ny;
    }
    let (fx, _) = crate::norms_ffn::joint_layer_norm(&x, &y, &m.final_ln).unwrap();
    let want = fx.matmul(&m.head).unwrap();
    assert!(model_forward(&tokens, &m).unwrap().logits.max_abs_diff(&want) <= 1e-12);
}

#[test]
fn token_errors() {
    let m = ModelParams::init(&toy_config(Variant::Wave, LnPlacement::Post), 5).unwrap();
    assert!(matches!(model_forward(&[0, 7], &m), Err(crate::Error::VocabOverflow { token: 7, vocab: 7 })));
    assert!(matches!(model_forward(&[0; 7], &m), Err(crate::Error::SequenceTooLong { len: 7, max: 6 })));
    assert!(model_forward(&[], &m).is_err());
}

#[test]
fn format_round_trip() {
    for (k, variant) in Variant::ALL.into_iter().enumerate() {
        let cfg = ModelConfig {
            gate_shape: GateShape::Vector,
            positional: if k % 2 == 0 { Positional::Learned } else { Positional::Sinusoidal },
            wavy_layers: WavyLayers::Ranges(vec![[1, 3]]),
            ..toy_config(variant, LnPlacement::Pre)
        };
        let m = ModelParams::init(&cfg, 6 + k as u64).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, m);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_model(bad.as_slice()).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_model(long.as_slice()).is_err());
        assert!(read_model(&buf[..buf.len() - 1]).is_err());
    }
}

#[test]
fn save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.wvtf");
    let m = ModelParams::init(&toy_config(Variant::MixOutput, LnPlacement::Post), 9).unwrap();
    save_model(&path, &m).unwrap();
    assert_eq!(load_model(&path).unwrap(), m);
}

#[test]
fn tensor_views_agree() {
    let mut m = ModelParams::init(&toy_config(Variant::Wave, LnPlacement::Post), 10).unwrap();
    let shapes: Vec<_> = m.tensors().iter().map(|(_, t)| t.shape()).collect();
    let mask_len = m.trainable_mask().len();
    let mut_shapes: Vec<_> = m.tensors_mut().iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, mut_shapes);
    assert_eq!(mask_len, shapes.len());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn serialization_is_lossless(seed in 0u64..1000, layers in 0usize..3, vector in any::<bool>()) {
            let cfg = ModelConfig {
                layers,
                gate_shape: if vector { GateShape::Vector } else { GateShape::Scalar },
                ..toy_config(Variant::MixOutput, LnPlacement::Post)
            };
            let mut m = ModelParams::init(&cfg, seed).unwrap();
            let mut rng = Prng::new(seed ^ 0xABCD);
            for t in m.tensors_mut() {
                for v in t.data_mut() {
                    *v = rng.normal() * 1e3;
                }
            }
            let mut buf = Vec::new();
            write_model(&mut buf, &m).unwrap();
            prop_assert_eq!(read_model(buf.as_slice()).unwrap(), m);
        }
    }
}
