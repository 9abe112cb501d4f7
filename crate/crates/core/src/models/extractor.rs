use rand::Rng;

use super::ModelDims;
use crate::tensor::{BatchNormState, BnMode, Bound, Graph, Init, ParamId, ParamSet, Scalar, Var};
use crate::Result;

/// Kernel 3, stride 3, zero padding 1.
pub const CONV_KERNEL: usize = 3;
pub const CONV_STRIDE: usize = 3;
pub const CONV_PAD: usize = 1;

#[derive(Clone, Copy, Debug)]
struct BnLayer {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
}

/// BN1 → Conv1/ReLU → BN2 → Conv2/ReLU → BN3 → Conv3/ReLU → BN4 → global
/// average pool.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    bn: [BnLayer; 4],
    conv: [ConvLayer; 3],
    pub states: [BatchNormState<T>; 4],
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet<T>, dims: &ModelDims, rng: &mut R) -> Self {
        let ch = [2, dims.conv_channels[0], dims.conv_channels[1], dims.conv_channels[2]];
        let bn = std::array::from_fn(|i| {
            let c = ch[i];
            BnLayer {
                gamma: params.add(&format!("extractor.bn{}.gamma", i + 1), &[c], Init::Ones, rng),
                beta: params.add(&format!("extractor.bn{}.beta", i + 1), &[c], Init::Zeros, rng),
            }
        });
        let conv = std::array::from_fn(|i| {
            let (ci, co) = (ch[i], ch[i + 1]);
            let fan_in = ci * CONV_KERNEL * CONV_KERNEL;
            ConvLayer {
                kernel: params.add(
                    &format!("extractor.conv{}.weight", i + 1),
                    &[co, ci, CONV_KERNEL, CONV_KERNEL],
                    Init::KaimingUniform { fan_in },
                    rng,
                ),
                bias: params.add(&format!("extractor.conv{}.bias", i + 1), &[co], Init::Zeros, rng),
            }
        });
        let states = std::array::from_fn(|i| BatchNormState::new(ch[i]));
        Self { bn, conv, states }
    }

    /// `input: R×2×S×S` to `R×F` features.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        input: Var,
        states: &mut [BatchNormState<T>; 4],
        mode: BnMode,
    ) -> Result<Var> {
        let mut x = input;
        for i in 0..4 {
            let bn = self.bn[i];
            x = g.batchnorm2d(x, bound[bn.gamma], bound[bn.beta], &mut states[i], mode)?;
            if i < 3 {
                let c = self.conv[i];
                x = g.conv2d(x, bound[c.kernel], bound[c.bias], CONV_STRIDE, CONV_PAD)?;
                x = g.relu(x)?;
            }
        }
        g.avgpool_global(x)
    }
}
