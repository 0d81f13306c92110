//! MLP encoder with a two-layer projection head and optional auxiliary
//! regression head.
//!
//! Layout: x -> [affine + relu]* -> affine -> h (the representation read by
//! probes), then head: affine -> relu -> affine -> l2-normalize -> z. The
//! auxiliary head is a single affine on h, used by the supervised L1
//! baselines.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numgrad::{Tape, Tensor, Var};

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub representation_dim: usize,
    pub projection_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Defaults: hidden [256, 128], d_enc 64, d 32.
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![256, 128],
            representation_dim: 64,
            projection_dim: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.representation_dim == 0
            || self.projection_dim == 0
            || self.hidden.iter().any(|w| *w == 0)
        {
            return Err(Error::InvalidConfig(
                "encoder dimensions must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One affine layer: weights (in, out) and bias (out).
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub w: Tensor,
    pub b: Tensor,
}

/// All learnable tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub encoder: Vec<Affine>,
    pub head: Vec<Affine>,
    pub aux: Option<Affine>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(vec![fan_in, fan_out], data).expect("xavier init is finite")
}

fn affine(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Affine {
    Affine {
        w: xavier(rng, fan_in, fan_out),
        b: Tensor::zeros(vec![fan_out]),
    }
}

impl Parameters {
    /// Deterministic Xavier-uniform initialization; biases zero. The aux
    /// head, when requested, is drawn after the projection head so the
    /// shared layers match a no-aux model with the same seed.
    pub fn init(config: &EncoderConfig, aux_out: Option<usize>) -> Result<Self> {
        config.validate()?;
        if aux_out == Some(0) {
            return Err(Error::InvalidConfig("aux head width must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut widths = vec![config.input_dim];
        widths.extend(&config.hidden);
        widths.push(config.representation_dim);
        let encoder = widths
            .windows(2)
            .map(|w| affine(&mut rng, w[0], w[1]))
            .collect();
        let head = vec![
            affine(&mut rng, config.representation_dim, config.representation_dim),
            affine(&mut rng, config.representation_dim, config.projection_dim),
        ];
        let aux = aux_out.map(|out| affine(&mut rng, config.representation_dim, out));
        Ok(Self { encoder, head, aux })
    }

    /// All tensors in the canonical order used by gradients, Adam state,
    /// and checkpoints: encoder (w, b) pairs, head (w, b) pairs, then the
    /// aux pair when present.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for a in self.encoder.iter().chain(&self.head).chain(&self.aux) {
            out.push(&a.w);
            out.push(&a.b);
        }
        out
    }

    /// Mutable view in the same canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for a in self
            .encoder
            .iter_mut()
            .chain(self.head.iter_mut())
            .chain(self.aux.iter_mut())
        {
            out.push(&mut a.w);
            out.push(&mut a.b);
        }
        out
    }
}

/// Tape handles for every parameter, in the canonical order.
pub struct ParamVars {
    pub encoder: Vec<(Var, Var)>,
    pub head: Vec<(Var, Var)>,
    pub aux: Option<(Var, Var)>,
}

impl ParamVars {
    pub fn leaf(tape: &mut Tape, params: &Parameters) -> Self {
        let pair = |tape: &mut Tape, a: &Affine| (tape.leaf(a.w.clone()), tape.leaf(a.b.clone()));
        Self {
            encoder: params.encoder.iter().map(|a| pair(tape, a)).collect(),
            head: params.head.iter().map(|a| pair(tape, a)).collect(),
            aux: params.aux.as_ref().map(|a| pair(tape, a)),
        }
    }

    /// Flat canonical order, matching `Parameters::tensors`.
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.encoder.iter().chain(&self.head).chain(&self.aux) {
            out.push(*w);
            out.push(*b);
        }
        out
    }

    /// Regroup a flat canonical list of leafs (as produced by `all`) back
    /// into the layer structure. Used by gradient-check harnesses that
    /// create the leafs themselves.
    pub fn from_ordered(vars: &[Var], encoder_layers: usize, has_aux: bool) -> Result<Self> {
        let expected = 2 * (encoder_layers + 2 + usize::from(has_aux));
        if vars.len() != expected {
            return Err(Error::LengthMismatch {
                left: vars.len(),
                right: expected,
            });
        }
        let pairs: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(Self {
            encoder: pairs[..encoder_layers].to_vec(),
            head: pairs[encoder_layers..encoder_layers + 2].to_vec(),
            aux: has_aux.then(|| pairs[encoder_layers + 2]),
        })
    }
}

/// Encoder forward pass: x (batch, input_dim) -> h (batch, d_enc).
pub fn encode_on_tape(tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var> {
    let layers = vars.encoder.len();
    let mut cur = x;
    for (i, (w, b)) in vars.encoder.iter().enumerate() {
        cur = tape.matmul(cur, *w)?;
        cur = tape.add(cur, *b)?;
        if i + 1 < layers {
            cur = tape.relu(cur)?;
        }
    }
    Ok(cur)
}

/// Projection head: h -> z (batch, d), rows on the unit sphere.
pub fn project_on_tape(tape: &mut Tape, vars: &ParamVars, h: Var) -> Result<Var> {
    let (w0, b0) = vars.head[0];
    let (w1, b1) = vars.head[1];
    let a = tape.matmul(h, w0)?;
    let a = tape.add(a, b0)?;
    let a = tape.relu(a)?;
    let a = tape.matmul(a, w1)?;
    let a = tape.add(a, b1)?;
    tape.l2_normalize_rows(a)
}

/// Auxiliary regression head: h -> predictions.
pub fn aux_on_tape(tape: &mut Tape, vars: &ParamVars, h: Var) -> Result<Var> {
    let (w, b) = vars.aux.ok_or_else(|| {
        Error::InvalidConfig("model has no auxiliary head for this loss variant".into())
    })?;
    let a = tape.matmul(h, w)?;
    tape.add(a, b)
}

/// Full forward on an existing tape.
pub fn forward_on_tape(tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<(Var, Var)> {
    let h = encode_on_tape(tape, vars, x)?;
    let z = project_on_tape(tape, vars, h)?;
    Ok((h, z))
}

/// Value-level forward: returns (h, z) tensors.
pub fn forward(params: &Parameters, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = ParamVars::leaf(&mut tape, params);
    let xv = tape.leaf(x.clone());
    let (h, z) = forward_on_tape(&mut tape, &vars, xv)?;
    Ok((tape.value(h).clone(), tape.value(z).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 10,
            hidden: vec![16, 8],
            representation_dim: 6,
            projection_dim: 4,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Parameters::init(&cfg(), None).unwrap();
        let b = Parameters::init(&cfg(), None).unwrap();
        assert_eq!(a, b);
        let mut other = cfg();
        other.seed = 4;
        let c = Parameters::init(&other, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes() {
        let config = EncoderConfig {
            input_dim: 100,
            hidden: vec![256, 128],
            representation_dim: 64,
            projection_dim: 32,
            seed: 0,
        };
        let p = Parameters::init(&config, None).unwrap();
        assert_eq!(p.encoder[0].w.shape(), &[100, 256]);
        assert_eq!(p.encoder[1].w.shape(), &[256, 128]);
        assert_eq!(p.encoder[2].w.shape(), &[128, 64]);
        assert_eq!(p.head.len(), 2);
        assert_eq!(p.head[0].w.shape(), &[64, 64]);
        assert_eq!(p.head[1].w.shape(), &[64, 32]);
        assert!(p.encoder[0].b.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn aux_head_does_not_shift_shared_init() {
        let a = Parameters::init(&cfg(), None).unwrap();
        let b = Parameters::init(&cfg(), Some(1)).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.head, b.head);
        assert!(b.aux.is_some());
        assert_eq!(b.aux.as_ref().unwrap().w.shape(), &[6, 1]);
    }

    #[test]
    fn forward_normalizes_z_rows() {
        let p = Parameters::init(&cfg(), None).unwrap();
        let x = Tensor::from_rows(&[
            (0..10).map(|i| i as f64 * 0.1).collect(),
            (0..10).map(|i| -(i as f64) * 0.05).collect(),
            (0..10).map(|i| ((i * 7) % 3) as f64 - 1.0).collect(),
        ])
        .unwrap();
        let (h, z) = forward(&p, &x).unwrap();
        assert_eq!(h.shape(), &[3, 6]);
        assert_eq!(z.shape(), &[3, 4]);
        for i in 0..3 {
            let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10, "row {} norm {}", i, norm);
        }
    }

    #[test]
    fn zero_input_maps_to_zero_z_row() {
        // Biases start at zero, so the zero input stays zero through the
        // network and the normalization guard leaves it untouched.
        let p = Parameters::init(&cfg(), None).unwrap();
        let x = Tensor::from_rows(&[vec![0.0; 10]]).unwrap();
        let (h, z) = forward(&p, &x).unwrap();
        assert!(h.data().iter().all(|v| *v == 0.0));
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_head_stays_finite() {
        let mut p = Parameters::init(&cfg(), None).unwrap();
        for a in p.head.iter_mut() {
            a.w = Tensor::zeros(a.w.shape().to_vec());
            a.b = Tensor::zeros(a.b.shape().to_vec());
        }
        let x = Tensor::from_rows(&[vec![0.5; 10]]).unwrap();
        let (_, z) = forward(&p, &x).unwrap();
        assert!(z.data().iter().all(|v| v.is_finite()));
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = Parameters::init(&cfg(), None).unwrap();
        let x = Tensor::from_rows(&[vec![1.0; 7]]).unwrap();
        assert!(matches!(forward(&p, &x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn tensor_order_is_stable() {
        let p = Parameters::init(&cfg(), Some(2)).unwrap();
        let ts = p.tensors();
        // 3 encoder affines + 2 head affines + 1 aux affine, (w, b) each.
        assert_eq!(ts.len(), 12);
        assert_eq!(ts[0].shape(), &[10, 16]);
        assert_eq!(ts[1].shape(), &[16]);
        assert_eq!(ts[10].shape(), &[6, 2]);
        assert_eq!(ts[11].shape(), &[2]);
    }

    #[test]
    fn aux_missing_is_an_error() {
        let p = Parameters::init(&cfg(), None).unwrap();
        let mut tape = Tape::new();
        let vars = ParamVars::leaf(&mut tape, &p);
        let x = tape.leaf(Tensor::from_rows(&[vec![0.1; 10]]).unwrap());
        let h = encode_on_tape(&mut tape, &vars, x).unwrap();
        assert!(aux_on_tape(&mut tape, &vars, h).is_err());
    }
}
