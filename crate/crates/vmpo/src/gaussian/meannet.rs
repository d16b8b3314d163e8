//! Minimal two-layer data-prediction network with hand-rolled reverse-mode
//! gradients. The nonlinearity is smooth (tanh) so finite-difference checks
//! are clean everywhere.

use crate::core::RngStream;
use crate::error::{invalid, Error, Result};

const TIME_FEATURES: usize = 4;
const MAGIC: [u8; 8] = *b"VMPOPAR\0";
const VERSION: u32 = 1;

/// Two affine maps with a tanh in between. Input is (x_t, sinusoidal time
/// embedding, condition one-hot); output is the data prediction x_hat.
#[derive(Debug, Clone)]
pub struct MeanNet {
    dim: usize,
    hidden: usize,
    num_conditions: usize,
    steps: usize,
    params: Vec<f64>,
}

/// Cached forward activations for one input.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    hidden_act: Vec<f64>,
    pub output: Vec<f64>,
}

impl MeanNet {
    pub fn new(
        dim: usize,
        hidden: usize,
        num_conditions: usize,
        steps: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if dim == 0 || hidden == 0 || num_conditions == 0 || steps == 0 {
            return Err(invalid("MeanNet dimensions must be positive"));
        }
        let input_dim = dim + TIME_FEATURES + num_conditions;
        let count = hidden * input_dim + hidden + dim * hidden + dim;
        let scale = 1.0 / (input_dim as f64).sqrt();
        let params = (0..count)
            .map(|_| scale * (2.0 * rng.next_f64() - 1.0))
            .collect();
        Ok(Self {
            dim,
            hidden,
            num_conditions,
            steps,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn input_dim(&self) -> usize {
        self.dim + TIME_FEATURES + self.num_conditions
    }

    fn build_input(&self, x: &[f64], t: usize, condition: u32) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if condition as usize >= self.num_conditions {
            return Err(invalid(format!("condition {condition} out of range")));
        }
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(x);
        let phase = t as f64 / self.steps as f64;
        input.push((std::f64::consts::PI * phase).sin());
        input.push((std::f64::consts::PI * phase).cos());
        input.push((std::f64::consts::TAU * phase).sin());
        input.push((std::f64::consts::TAU * phase).cos());
        for c in 0..self.num_conditions {
            input.push(if c == condition as usize { 1.0 } else { 0.0 });
        }
        Ok(input)
    }

    // Parameter layout: W1 (hidden x input, row-major), b1, W2 (dim x hidden), b2.
    fn w1(&self, j: usize, i: usize) -> f64 {
        self.params[j * self.input_dim() + i]
    }

    fn b1(&self, j: usize) -> f64 {
        self.params[self.hidden * self.input_dim() + j]
    }

    fn w2(&self, o: usize, j: usize) -> f64 {
        self.params[self.hidden * (self.input_dim() + 1) + o * self.hidden + j]
    }

    fn b2(&self, o: usize) -> f64 {
        self.params[self.hidden * (self.input_dim() + 1) + self.dim * self.hidden + o]
    }

    /// Deterministic forward pass; returns the prediction with cached
    /// activations for the matching backward call.
    pub fn forward(&self, x: &[f64], t: usize, condition: u32) -> Result<ForwardCache> {
        let input = self.build_input(x, t, condition)?;
        let mut hidden_act = Vec::with_capacity(self.hidden);
        for j in 0..self.hidden {
            let mut z = self.b1(j);
            for (i, &inp) in input.iter().enumerate() {
                z += self.w1(j, i) * inp;
            }
            hidden_act.push(z.tanh());
        }
        let mut output = Vec::with_capacity(self.dim);
        for o in 0..self.dim {
            let mut z = self.b2(o);
            for (j, &h) in hidden_act.iter().enumerate() {
                z += self.w2(o, j) * h;
            }
            output.push(z);
        }
        Ok(ForwardCache {
            input,
            hidden_act,
            output,
        })
    }

    /// Accumulate the exact reverse-mode gradient of <adjoint, x_hat> with
    /// respect to the parameters into `grad`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        adjoint: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if adjoint.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: self.dim,
                got: adjoint.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let input_dim = self.input_dim();
        let w2_base = self.hidden * (input_dim + 1);
        let b2_base = w2_base + self.dim * self.hidden;
        // Output layer.
        for (o, &adj) in adjoint.iter().enumerate() {
            for (j, &h) in cache.hidden_act.iter().enumerate() {
                grad[w2_base + o * self.hidden + j] += adj * h;
            }
            grad[b2_base + o] += adj;
        }
        // Hidden layer through the tanh.
        for (j, &h) in cache.hidden_act.iter().enumerate() {
            let mut dh = 0.0;
            for (o, &adj) in adjoint.iter().enumerate() {
                dh += adj * self.w2(o, j);
            }
            let dz = dh * (1.0 - h * h);
            for (i, &inp) in cache.input.iter().enumerate() {
                grad[j * input_dim + i] += dz * inp;
            }
            grad[self.hidden * input_dim + j] += dz;
        }
        Ok(())
    }

    /// Gradient of <adjoint, x_hat> for a single input, freshly allocated.
    pub fn backward(&self, cache: &ForwardCache, adjoint: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(cache, adjoint, &mut grad)?;
        Ok(grad)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: self.params.len(),
                got: flat.len(),
            });
        }
        self.params.copy_from_slice(flat);
        Ok(())
    }

    /// Serialise the parameter vector: 16-byte header (magic, version, P)
    /// followed by P little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        params_to_bytes(&self.params)
    }

    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let params = params_from_bytes(bytes)?;
        self.unflatten_into(&params)
    }
}

pub fn params_to_bytes(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for &p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() < 16 || bytes[..8] != MAGIC {
        return Err(invalid("bad parameter header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(invalid(format!("unsupported parameter version {version}")));
    }
    let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + count * 8 {
        return Err(invalid("parameter payload length mismatch"));
    }
    Ok((0..count)
        .map(|i| f64::from_le_bytes(bytes[16 + i * 8..24 + i * 8].try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> MeanNet {
        let mut rng = RngStream::new(77, 0);
        MeanNet::new(2, 5, 2, 4, &mut rng).unwrap()
    }

    #[test]
    fn zero_adjoint_gives_zero_gradient() {
        let net = net();
        let cache = net.forward(&[0.3, -0.2], 2, 1).unwrap();
        let grad = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_adjoint() {
        let net = net();
        let cache = net.forward(&[0.5, 0.1], 3, 0).unwrap();
        let a1 = vec![0.7, -0.3];
        let a2 = vec![-0.2, 1.1];
        let sum: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x + y).collect();
        let g1 = net.backward(&cache, &a1).unwrap();
        let g2 = net.backward(&cache, &a2).unwrap();
        let gs = net.backward(&cache, &sum).unwrap();
        for i in 0..gs.len() {
            assert!((gs[i] - g1[i] - g2[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences_on_every_parameter() {
        let mut net = net();
        let x = vec![0.4, -0.6];
        let (t, c) = (2, 1);
        let adjoint = vec![0.9, -0.4];
        let cache = net.forward(&x, t, c).unwrap();
        let analytic = net.backward(&cache, &adjoint).unwrap();
        let h = 1e-5;
        let value = |net: &MeanNet| {
            let out = net.forward(&x, t, c).unwrap().output;
            out.iter().zip(&adjoint).map(|(o, a)| o * a).sum::<f64>()
        };
        let mut flat = net.flatten();
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + h;
            net.unflatten_into(&flat).unwrap();
            let up = value(&net);
            flat[i] = orig - h;
            net.unflatten_into(&flat).unwrap();
            let down = value(&net);
            flat[i] = orig;
            net.unflatten_into(&flat).unwrap();
            let fd = (up - down) / (2.0 * h);
            let scale = analytic[i].abs().max(1.0);
            assert!(
                (analytic[i] - fd).abs() / scale < 1e-5,
                "param {i}: {} vs {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn forward_is_deterministic_and_params_round_trip() {
        let net = net();
        let a = net.forward(&[0.1, 0.2], 1, 0).unwrap().output;
        let b = net.forward(&[0.1, 0.2], 1, 0).unwrap().output;
        assert_eq!(a, b);

        let mut other = net.clone();
        other.load_bytes(&net.to_bytes()).unwrap();
        assert_eq!(net.flatten(), other.flatten());
        assert!(matches!(
            params_from_bytes(b"not a header"),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = net();
        let cache = net.forward(&[0.1, 0.2], 1, 0).unwrap();
        assert!(net.backward(&cache, &[1.0]).is_err());
        assert!(net.forward(&[0.1], 1, 0).is_err());
    }
}
