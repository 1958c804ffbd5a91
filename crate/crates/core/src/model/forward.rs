use crate::error::{KvwError, Result};
use crate::model::{FfnVariant, LayerWeights, ModelConfig, ModelWeights};
use crate::tensor::{add_in_place, dot, MacCounter, Matrix};

/// Everything a forward pass exposes to the unlearning code.
///
/// Row `t` of `coefficients[l]` multiplied against `layers[l].ffn_value`
/// reproduces row `t` of `ffn_outputs[l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Per layer, `[seq_len × d]` normalized FFN inputs.
    pub ffn_inputs: Vec<Matrix>,
    /// Per layer, `[seq_len × m]` post-activation, pre-down-projection values.
    pub coefficients: Vec<Matrix>,
    /// Per layer, `[seq_len × d]` FFN outputs.
    pub ffn_outputs: Vec<Matrix>,
    /// `[seq_len × vocab_size]`
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }
}

/// Single-position FFN on an already normalized input.
///
/// Returns `(y, coeffs)` with `y = Σ_i coeffs_i · v_i`.
pub fn ffn_forward(
    x: &[f32],
    layer: &LayerWeights,
    config: &ModelConfig,
    layer_idx: usize,
    counter: &mut MacCounter,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let d = config.d_model;
    let m = config.ffn_dim;
    if x.len() != d || layer.ffn_key.shape() != [m, d] || layer.ffn_value.shape() != [m, d] {
        return Err(KvwError::Config(format!(
            "layer {layer_idx}: FFN input/weight shapes do not match config"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KvwError::Numeric {
            layer: layer_idx,
            msg: "non-finite FFN input".into(),
        });
    }
    let act = config.activation;
    let up = layer.ffn_key.matvec(x, counter);
    let coeffs: Vec<f32> = match (config.ffn_variant, &layer.ffn_gate) {
        (FfnVariant::Plain, None) => up.into_iter().map(|v| act.apply(v)).collect(),
        (FfnVariant::Gated, Some(gate)) => {
            if gate.shape() != [m, d] {
                return Err(KvwError::Config(format!(
                    "layer {layer_idx}: ffn_gate shape does not match config"
                )));
            }
            let g = gate.matvec(x, counter);
            g.into_iter()
                .zip(up)
                .map(|(g, u)| act.apply(g) * u)
                .collect()
        }
        _ => {
            return Err(KvwError::Config(format!(
                "layer {layer_idx}: gate tensor presence does not match ffn_variant"
            )))
        }
    };
    let y = layer.ffn_value.weighted_row_sum(&coeffs, counter);
    if y.iter().chain(&coeffs).any(|v| !v.is_finite()) {
        return Err(KvwError::Numeric {
            layer: layer_idx,
            msg: "non-finite FFN intermediate".into(),
        });
    }
    Ok((y, coeffs))
}

pub fn forward(tokens: &[u32], weights: &ModelWeights, config: &ModelConfig) -> Result<ForwardTrace> {
    forward_counted(tokens, weights, config, &mut MacCounter::new())
}

/// Full causal forward pass, reporting every multiply-accumulate to `counter`.
pub fn forward_counted(
    tokens: &[u32],
    weights: &ModelWeights,
    config: &ModelConfig,
    counter: &mut MacCounter,
) -> Result<ForwardTrace> {
    let n = tokens.len();
    if n == 0 {
        return Err(KvwError::Input("empty token sequence".into()));
    }
    if n > config.max_seq_len {
        return Err(KvwError::Input(format!(
            "sequence length {n} exceeds max_seq_len {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(KvwError::Input(format!(
            "token id {bad} out of range for vocab_size {}",
            config.vocab_size
        )));
    }
    let d = config.d_model;
    let m = config.ffn_dim;

    let mut hidden = embed(tokens, weights);

    let mut ffn_inputs = Vec::with_capacity(config.num_layers);
    let mut coefficients = Vec::with_capacity(config.num_layers);
    let mut ffn_outputs = Vec::with_capacity(config.num_layers);

    for (l, layer) in weights.layers.iter().enumerate() {
        let attn = attention(&hidden, layer, config, counter);
        for (h, a) in hidden.iter_mut().zip(&attn) {
            add_in_place(h, a);
        }

        let mut inputs = Matrix::zeros(n, d);
        let mut coeffs = Matrix::zeros(n, m);
        let mut outputs = Matrix::zeros(n, d);
        for (t, h) in hidden.iter_mut().enumerate() {
            let x = config.norm.apply(h, &layer.ffn_norm);
            let (y, c) = ffn_forward(&x, layer, config, l, counter)?;
            add_in_place(h, &y);
            inputs.row_mut(t).copy_from_slice(&x);
            coeffs.row_mut(t).copy_from_slice(&c);
            outputs.row_mut(t).copy_from_slice(&y);
        }
        if hidden.iter().flatten().any(|v| !v.is_finite()) {
            return Err(KvwError::Numeric {
                layer: l,
                msg: "non-finite residual stream".into(),
            });
        }
        ffn_inputs.push(inputs);
        coefficients.push(coeffs);
        ffn_outputs.push(outputs);
    }

    let mut logits = Matrix::zeros(n, config.vocab_size);
    for (t, h) in hidden.iter().enumerate() {
        let x = config.norm.apply(h, &weights.final_norm);
        let row = weights.unembedding.matvec(&x, counter);
        logits.row_mut(t).copy_from_slice(&row);
    }
    if !logits.is_finite() {
        return Err(KvwError::Numeric {
            layer: config.num_layers.saturating_sub(1),
            msg: "non-finite logits".into(),
        });
    }

    Ok(ForwardTrace {
        ffn_inputs,
        coefficients,
        ffn_outputs,
        logits,
    })
}

/// Embedding plus position rows for `tokens`, unchecked.
fn embed(tokens: &[u32], weights: &ModelWeights) -> Vec<Vec<f32>> {
    tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            weights
                .embedding
                .row(tok as usize)
                .iter()
                .zip(weights.position.row(t))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect()
}

/// Runs layers `from..to` on a residual stream without recording a trace.
fn run_layers(
    hidden: &mut [Vec<f32>],
    from: usize,
    to: usize,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<()> {
    let mut counter = MacCounter::new();
    for l in from..to {
        let layer = &weights.layers[l];
        let attn = attention(hidden, layer, config, &mut counter);
        for (h, a) in hidden.iter_mut().zip(&attn) {
            add_in_place(h, a);
            let x = config.norm.apply(h, &layer.ffn_norm);
            let (y, _) = ffn_forward(&x, layer, config, l, &mut counter)?;
            add_in_place(h, &y);
        }
    }
    Ok(())
}

/// Residual stream entering `layer`, for callers that repeatedly edit only
/// layers at or above it. `tokens` must already be validated.
pub(crate) fn residual_before(
    tokens: &[u32],
    layer: usize,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<Vec<Vec<f32>>> {
    let mut hidden = embed(tokens, weights);
    run_layers(&mut hidden, 0, layer, weights, config)?;
    Ok(hidden)
}

/// Last-position logits after running `hidden` from `layer` to the top.
pub(crate) fn last_logits_from(
    mut hidden: Vec<Vec<f32>>,
    layer: usize,
    weights: &ModelWeights,
    config: &ModelConfig,
) -> Result<Vec<f32>> {
    run_layers(&mut hidden, layer, config.num_layers, weights, config)?;
    let last = hidden.last().ok_or_else(|| KvwError::Input("empty token sequence".into()))?;
    let x = config.norm.apply(last, &weights.final_norm);
    let logits = weights.unembedding.matvec(&x, &mut MacCounter::new());
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(KvwError::Numeric {
            layer: config.num_layers.saturating_sub(1),
            msg: "non-finite logits".into(),
        });
    }
    Ok(logits)
}

/// Multi-head causal self-attention over the whole sequence.
fn attention(
    hidden: &[Vec<f32>],
    layer: &LayerWeights,
    config: &ModelConfig,
    counter: &mut MacCounter,
) -> Vec<Vec<f32>> {
    let n = hidden.len();
    let d = config.d_model;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut q = Vec::with_capacity(n);
    let mut k = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for h in hidden {
        let x = config.norm.apply(h, &layer.attn_norm);
        q.push(layer.attn_q.matvec(&x, counter));
        k.push(layer.attn_k.matvec(&x, counter));
        v.push(layer.attn_v.matvec(&x, counter));
    }

    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut mixed = vec![0.0f32; d];
        for head in 0..config.num_heads {
            let span = head * hd..(head + 1) * hd;
            let scores: Vec<f64> = (0..=t)
                .map(|j| dot(&q[t][span.clone()], &k[j][span.clone()]) as f64 * scale)
                .collect();
            counter.add((t + 1) * hd);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (i, slot) in mixed[span.clone()].iter_mut().enumerate() {
                let acc: f64 = exps
                    .iter()
                    .enumerate()
                    .map(|(j, e)| e / total * v[j][head * hd + i] as f64)
                    .sum();
                *slot = acc as f32;
            }
            counter.add((t + 1) * hd);
        }
        out.push(layer.attn_o.matvec(&mixed, counter));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Norm};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(d: usize, m: usize, variant: FfnVariant, act: Activation) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            d_model: d,
            ffn_dim: m,
            num_heads: 1,
            vocab_size: 8,
            max_seq_len: 4,
            activation: act,
            ffn_variant: variant,
            norm: Norm::Rmsnorm,
        }
    }

    #[test]
    fn single_key_fires() {
        let cfg = tiny_config(2, 2, FfnVariant::Plain, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut w = ModelWeights::random(&cfg, 0.1, &mut rng);
        w.layers[0].ffn_key = Matrix::identity(2);
        w.layers[0].ffn_value = Matrix::identity(2);
        let (y, c) = ffn_forward(&[3.0, 0.0], &w.layers[0], &cfg, 0, &mut MacCounter::new()).unwrap();
        assert_eq!(c, vec![3.0, 0.0]);
        assert_eq!(y, vec![3.0, 0.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        for act in [Activation::Relu, Activation::Silu] {
            for variant in [FfnVariant::Plain, FfnVariant::Gated] {
                let cfg = tiny_config(4, 8, variant, act);
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let w = ModelWeights::random(&cfg, 1.0, &mut rng);
                let (y, c) =
                    ffn_forward(&[0.0; 4], &w.layers[0], &cfg, 0, &mut MacCounter::new()).unwrap();
                assert!(c.iter().all(|&v| v == 0.0));
                assert!(y.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn matrix_path_matches_elementwise_loop() {
        let cfg = tiny_config(4, 8, FfnVariant::Plain, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ModelWeights::random(&cfg, 1.0, &mut rng);
        let x = [0.5f32, -1.25, 2.0, 0.75];
        let (y, _) = ffn_forward(&x, &w.layers[0], &cfg, 0, &mut MacCounter::new()).unwrap();

        // independent loop: c_i = relu(Σ_j K[i][j] x_j), y_k = Σ_i c_i V[i][k]
        let key = &w.layers[0].ffn_key;
        let value = &w.layers[0].ffn_value;
        let mut expected = [0.0f64; 4];
        for i in 0..8 {
            let mut pre = 0.0f64;
            for j in 0..4 {
                pre += key.get(i, j) as f64 * x[j] as f64;
            }
            let c = pre.max(0.0);
            for k in 0..4 {
                expected[k] += c * value.get(i, k) as f64;
            }
        }
        for k in 0..4 {
            assert!((y[k] as f64 - expected[k]).abs() < 1e-6, "{} vs {}", y[k], expected[k]);
        }
    }

    #[test]
    fn gated_coefficients_are_gate_times_up() {
        let cfg = tiny_config(4, 8, FfnVariant::Gated, Activation::Silu);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = ModelWeights::random(&cfg, 1.0, &mut rng);
        let x = [1.0f32, -0.5, 0.25, 2.0];
        let (_, c) = ffn_forward(&x, &w.layers[0], &cfg, 0, &mut MacCounter::new()).unwrap();
        let gate = w.layers[0].ffn_gate.as_ref().unwrap();
        for i in 0..8 {
            let g = Activation::Silu.apply(dot(gate.row(i), &x));
            let u = dot(w.layers[0].ffn_key.row(i), &x);
            assert!((c[i] - g * u).abs() < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let cfg = tiny_config(4, 8, FfnVariant::Plain, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ModelWeights::random(&cfg, 1.0, &mut rng);
        let err = ffn_forward(&[1.0; 3], &w.layers[0], &cfg, 0, &mut MacCounter::new()).unwrap_err();
        assert!(matches!(err, KvwError::Config(_)));
    }

    #[test]
    fn non_finite_input_names_layer() {
        let cfg = tiny_config(4, 8, FfnVariant::Plain, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ModelWeights::random(&cfg, 1.0, &mut rng);
        let err = ffn_forward(&[f32::NAN, 0.0, 0.0, 0.0], &w.layers[0], &cfg, 7, &mut MacCounter::new())
            .unwrap_err();
        assert!(matches!(err, KvwError::Numeric { layer: 7, .. }));
    }

    #[test]
    fn forward_input_errors() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ModelWeights::random(&cfg, 0.1, &mut rng);
        assert!(matches!(forward(&[600], &w, &cfg), Err(KvwError::Input(_))));
        assert!(matches!(forward(&[1; 17], &w, &cfg), Err(KvwError::Input(_))));
        assert!(matches!(forward(&[], &w, &cfg), Err(KvwError::Input(_))));
    }

    #[test]
    fn single_token_trace_shape() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = ModelWeights::random(&cfg, 0.1, &mut rng);
        let trace = forward(&[5], &w, &cfg).unwrap();
        assert_eq!(trace.seq_len(), 1);
        assert_eq!(trace.coefficients.len(), cfg.num_layers);
        for c in &trace.coefficients {
            assert_eq!(c.shape(), [1, cfg.ffn_dim]);
        }
        assert_eq!(trace.logits.shape(), [1, cfg.vocab_size]);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = ModelWeights::random(&cfg, 0.1, &mut rng);
        let toks = [3, 9, 27, 81];
        let a = forward(&toks, &w, &cfg).unwrap();
        let b = forward(&toks, &w, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trace_coefficients_reproduce_ffn_outputs() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = ModelWeights::random(&cfg, 0.1, &mut rng);
        let trace = forward(&[1, 2, 3], &w, &cfg).unwrap();
        for (l, layer) in w.layers.iter().enumerate() {
            for t in 0..3 {
                let y = layer
                    .ffn_value
                    .weighted_row_sum(trace.coefficients[l].row(t), &mut MacCounter::new());
                let out = trace.ffn_outputs[l].row(t);
                let norm: f32 = out.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                let err: f32 = y.iter().zip(out).map(|(a, b)| (a - b).abs()).sum();
                assert!(err / norm < 1e-5);
            }
        }
    }
}
