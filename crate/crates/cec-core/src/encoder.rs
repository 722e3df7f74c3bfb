//! Small convolutional embedding producing a 5x5 grid of patch features
//! from a 32x32 frame. Four 3x3 conv blocks; downsampling uses average
//! pooling and the nonlinearity is tanh, keeping the whole map smooth for
//! finite-difference checks.

use rand::Rng;

use crate::connect::FeatureMap;
use crate::error::{CecError, Result};
use crate::scalar::Scalar;
use crate::synth::IMAGE_SIZE;
use crate::tensor::Tensor;

/// Patch rows produced per image: the final 5x5 grid.
pub const PATCH_ROWS: usize = 25;

/// Weights of the four conv blocks, all learnable. Widths run
/// 3 -> c -> c -> c -> c with 3x3 kernels throughout.
#[derive(Debug, Clone)]
pub struct EncoderParams<S: Scalar> {
    pub conv_w: [Tensor<S>; 4],
    pub conv_b: [Tensor<S>; 4],
    pub channels: usize,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels < 1 {
            return Err(CecError::Parameter("encoder needs at least one channel".into()));
        }
        let widths = [(3, channels), (channels, channels), (channels, channels), (channels, channels)];
        let mut conv_w = Vec::with_capacity(4);
        let mut conv_b = Vec::with_capacity(4);
        for (cin, cout) in widths {
            // Xavier-uniform with the tanh gain, so feature magnitudes
            // survive the four-block stack
            let bound = (5.0 / 3.0) * (6.0 / ((cin + cout) * 9) as f64).sqrt();
            let data = (0..cout * cin * 9)
                .map(|_| S::from_f64_c(rng.gen_range(-bound..bound)))
                .collect();
            conv_w.push(Tensor::param(vec![cout, cin, 3, 3], data)?);
            conv_b.push(Tensor::param(vec![cout], vec![S::zero(); cout])?);
        }
        Ok(EncoderParams {
            conv_w: conv_w.try_into().expect("four blocks"),
            conv_b: conv_b.try_into().expect("four blocks"),
            channels,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::with_capacity(8);
        for i in 0..4 {
            out.push((format!("conv{}.w", i + 1), self.conv_w[i].clone()));
            out.push((format!("conv{}.b", i + 1), self.conv_b[i].clone()));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out: Vec<(String, &mut Tensor<S>)> = Vec::with_capacity(8);
        for (i, (w, b)) in self.conv_w.iter_mut().zip(self.conv_b.iter_mut()).enumerate() {
            out.push((format!("conv{}.w", i + 1), w));
            out.push((format!("conv{}.b", i + 1), b));
        }
        out
    }

    /// Copy whose tensors are cut out of any gradient graph; used when the
    /// embedding is frozen or when running inference.
    pub fn detached(&self) -> Self {
        EncoderParams {
            conv_w: [
                self.conv_w[0].detach(),
                self.conv_w[1].detach(),
                self.conv_w[2].detach(),
                self.conv_w[3].detach(),
            ],
            conv_b: [
                self.conv_b[0].detach(),
                self.conv_b[1].detach(),
                self.conv_b[2].detach(),
                self.conv_b[3].detach(),
            ],
            channels: self.channels,
        }
    }
}

/// Forward pass: 32 -> 16 -> 7 -> 5 -> 5 spatial, then patches as rows.
pub fn encode<S: Scalar>(pixels: &Tensor<S>, params: &EncoderParams<S>) -> Result<FeatureMap<S>> {
    if pixels.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(CecError::Dimension(format!(
            "encoder expects [3, {IMAGE_SIZE}, {IMAGE_SIZE}] pixels, got {:?}",
            pixels.shape()
        )));
    }
    // pixels arrive in [0, 1]; rescale so first-block activations do not
    // start vanishingly small
    let scaled = pixels.scale(S::from_f64_c(2.0));
    let b1 = scaled
        .conv2d(&params.conv_w[0], &params.conv_b[0], 1)?
        .tanh()
        .avg_pool2()?; // 32 -> 16
    let b2 = b1
        .conv2d(&params.conv_w[1], &params.conv_b[1], 0)?
        .tanh()
        .avg_pool2()?; // 16 -> 14 -> 7
    let b3 = b2.conv2d(&params.conv_w[2], &params.conv_b[2], 0)?.tanh(); // 7 -> 5
    let b4 = b3.conv2d(&params.conv_w[3], &params.conv_b[3], 1)?.tanh(); // 5 -> 5
    FeatureMap::new(b4.chw_to_rows()?)
}
