use rand::Rng;

use crate::autodiff::{Graph, ParamSet, ParamVars, Tensor, Var};
use crate::error::Result;

/// Fully connected network with SiLU between layers and a linear output.
///
/// Weights are stored `[fan_in, fan_out]` so a batch `[b, fan_in]` maps to
/// `[b, fan_out]` by a single right-multiplication.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    /// `sizes` lists every layer width from input to output (at least two entries).
    pub fn new(prefix: impl Into<String>, sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        Mlp {
            prefix: prefix.into(),
            sizes,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.{layer}.weight", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.{layer}.bias", self.prefix)
    }

    /// Fan-in scaled uniform init, `U(-1/√fan_in, 1/√fan_in)`. With
    /// `zero_last` the output layer starts at exactly zero.
    pub fn init<R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet,
        rng: &mut R,
        zero_last: bool,
    ) -> Result<()> {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let last = l + 1 == self.layers();
            let mut draw = |n: usize| -> Vec<f64> {
                if last && zero_last {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            let w = draw(fan_in * fan_out);
            let b = draw(fan_out);
            params.insert(self.weight_name(l), Tensor::new([fan_in, fan_out], w)?)?;
            params.insert(self.bias_name(l), Tensor::new([fan_out], b)?)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamVars, input: Var) -> Result<Var> {
        let mut h = input;
        for l in 0..self.layers() {
            let w = params.get(&self.weight_name(l))?;
            let b = params.get(&self.bias_name(l))?;
            let lin = g.matmul(h, w)?;
            h = g.add(lin, b)?;
            if l + 1 < self.layers() {
                h = g.silu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_last_layer_gives_zero_output() {
        let mlp = Mlp::new("enc", vec![3, 8, 4]);
        let mut p = ParamSet::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        mlp.init(&mut p, &mut rng, true).unwrap();
        let mut g = Graph::new();
        let pv = p.bind(&mut g, false);
        let x = g.constant(Tensor::full([2, 3], 0.7));
        let y = mlp.forward(&mut g, &pv, x).unwrap();
        assert_eq!(g.shape(y), &[2, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}
