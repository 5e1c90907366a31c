//! TextCNN prediction head shared by every fusion strategy.
//!
//! Three convolution banks (kernel sizes 3, 4, 5) run over the fused
//! sequence, each followed by ReLU and a global max over positions. The
//! pooled features are concatenated, passed through dropout, and mapped to
//! the task outputs by a linear layer.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{uniform, Linear};

pub const KERNEL_SIZES: [usize; 3] = [3, 4, 5];
pub const HEAD_DROPOUT: f64 = 0.2;

#[derive(Clone, Copy, Debug)]
pub struct ConvBank {
    pub kernel: usize,
    /// `[channels, d_in, kernel]`
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct TextCnn {
    pub banks: [ConvBank; 3],
    pub channels: usize,
    pub dropout: f64,
    pub output: Linear,
}

impl TextCnn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        d_in: usize,
        channels: usize,
        outputs: usize,
        dropout: f64,
    ) -> Result<Self> {
        let mut bank = |kernel: usize| -> Result<ConvBank> {
            let bound = 1.0 / ((d_in * kernel) as f64).sqrt();
            Ok(ConvBank {
                kernel,
                weight: store.insert(
                    format!("head.conv{kernel}.weight"),
                    uniform(rng, &[channels, d_in, kernel], bound),
                )?,
                bias: store.insert(format!("head.conv{kernel}.bias"), uniform(rng, &[channels], bound))?,
            })
        };
        let banks = [bank(3)?, bank(4)?, bank(5)?];
        let output = Linear::new(store, rng, "head.output", 3 * channels, outputs)?;
        Ok(Self {
            banks,
            channels,
            dropout,
            output,
        })
    }

    /// Concatenated pooled bank activations, `[1, 3·channels]`, before dropout.
    pub fn pooled(&self, g: &mut Graph<'_>, fused: NodeId) -> Result<NodeId> {
        let len = g.value(fused).rows();
        let min = KERNEL_SIZES[2];
        if len < min {
            return Err(Error::SequenceTooShort { length: len, min });
        }
        let mut pooled = Vec::with_capacity(3);
        for bank in &self.banks {
            let w = g.param(bank.weight);
            let b = g.param(bank.bias);
            let c = g.conv1d(fused, w, Some(b), 1, 0)?;
            let c = g.relu(c)?;
            pooled.push(g.global_max_pool(c)?);
        }
        g.concat_feature(&pooled)
    }

    /// Prediction `[1, outputs]`. Dropout is active only when the graph is in train mode.
    pub fn forward(&self, g: &mut Graph<'_>, fused: NodeId) -> Result<NodeId> {
        let pooled = self.pooled(g, fused)?;
        let dropped = g.dropout(pooled, 1.0 - self.dropout)?;
        self.output.forward(g, dropped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn head(seed: u64, d_in: usize, channels: usize, outputs: usize) -> (ParamStore, TextCnn) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = TextCnn::new(&mut store, &mut rng, d_in, channels, outputs, HEAD_DROPOUT).unwrap();
        (store, h)
    }

    fn randn(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn regression_output_width_is_one() {
        let (store, h) = head(0, 6, 8, 1);
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let x = g.constant(randn(1, 9, 6));
        let y = h.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 1]);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn zero_input_and_biases_predict_zero() {
        let (mut store, h) = head(0, 4, 5, 1);
        for b in h.banks.iter().map(|b| b.bias).chain([h.output.bias]) {
            store.value_mut(b).data_mut().fill(0.0);
        }
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let x = g.constant(Tensor::zeros(&[7, 4]));
        let y = h.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).item(), 0.0);
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let (store, h) = head(0, 4, 5, 1);
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let x = g.constant(randn(2, 4, 4));
        assert!(matches!(
            h.forward(&mut g, x),
            Err(Error::SequenceTooShort { length: 4, min: 5 })
        ));
    }

    #[test]
    fn duplicating_constant_rows_keeps_pooled_max() {
        let (store, h) = head(3, 4, 6, 1);
        let row = randn(4, 1, 4);
        let x = Tensor::matrix(6, 4, row.data().repeat(6)).unwrap();
        let xx = Tensor::matrix(12, 4, row.data().repeat(12)).unwrap();
        let mut g = Graph::with_params(&store, Mode::Eval, 0);
        let a = g.constant(x);
        let b = g.constant(xx);
        let pa = h.pooled(&mut g, a).unwrap();
        let pb = h.pooled(&mut g, b).unwrap();
        assert_eq!(g.value(pa), g.value(pb));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let (store, h) = head(5, 4, 16, 1);
        let x = randn(6, 8, 4);
        let eval = {
            let mut g = Graph::with_params(&store, Mode::Eval, 1);
            let xi = g.constant(x.clone());
            let y = h.forward(&mut g, xi).unwrap();
            g.value(y).item()
        };
        let eval2 = {
            let mut g = Graph::with_params(&store, Mode::Eval, 2);
            let xi = g.constant(x.clone());
            let y = h.forward(&mut g, xi).unwrap();
            g.value(y).item()
        };
        assert_eq!(eval, eval2);
        let train = |seed| {
            let mut g = Graph::with_params(&store, Mode::Train, seed);
            let xi = g.constant(x.clone());
            let y = h.forward(&mut g, xi).unwrap();
            g.value(y).item()
        };
        assert_eq!(train(7), train(7));
        assert_ne!(train(7), eval);
    }
}
