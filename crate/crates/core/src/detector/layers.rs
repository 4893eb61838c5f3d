use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{col2im, gemm, im2col, ConvGeometry, Tensor};

use super::params::{Gradients, ParamId, ParamRole, ParamSet};

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// 2-D convolution over `[C, N, H, W]` activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    geometry: ConvGeometry,
}

impl Conv2d {
    /// He-normal weights scaled by `gain`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        role: ParamRole,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let w = gaussian(rng, out_channels * fan_in, std);
        let weight = params.add(format!("{name}.weight"), role, Tensor::from_vec(&[out_channels, fan_in], w));
        let bias = params.add(format!("{name}.bias"), role, Tensor::zeros(&[out_channels]));
        Self { weight, bias, in_channels, out_channels, kernel, stride, pad: kernel / 2 }
    }

    fn geometry(&self, input: &Tensor) -> ConvGeometry {
        let s = input.shape();
        assert_eq!(s.len(), 4, "conv input must be [C, N, H, W]");
        assert_eq!(s[0], self.in_channels, "conv input channel mismatch");
        ConvGeometry {
            in_channels: s[0],
            batch: s[1],
            height: s[2],
            width: s[3],
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn forward(&self, params: &ParamSet, input: &Tensor) -> (Tensor, ConvCache) {
        let g = self.geometry(input);
        let cols = if self.kernel == 1 && self.stride == 1 { input.data().to_vec() } else { im2col(input.data(), &g) };
        let positions = g.out_positions();
        let mut out = vec![0.0; self.out_channels * positions];
        gemm(
            self.out_channels,
            g.patch_len(),
            positions,
            1.0,
            params.get(self.weight).data(),
            false,
            &cols,
            false,
            0.0,
            &mut out,
        );
        let bias = params.get(self.bias).data();
        for (row, b) in out.chunks_mut(positions).zip(bias) {
            row.iter_mut().for_each(|v| *v += b);
        }
        let shape = [self.out_channels, g.batch, g.out_height(), g.out_width()];
        (Tensor::from_vec(&shape, out), ConvCache { cols, geometry: g })
    }

    /// Accumulates weight gradients (when active) and returns the input
    /// gradient when `need_input_grad`.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &ConvCache,
        grad_out: &Tensor,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let g = &cache.geometry;
        let positions = g.out_positions();
        let patch = g.patch_len();
        let dout = grad_out.data();
        if grads.is_active(self.weight) {
            gemm(
                self.out_channels,
                positions,
                patch,
                1.0,
                dout,
                false,
                &cache.cols,
                true,
                1.0,
                grads.get_mut(self.weight).data_mut(),
            );
        }
        if grads.is_active(self.bias) {
            let db = grads.get_mut(self.bias).data_mut();
            for (b, row) in db.iter_mut().zip(dout.chunks(positions)) {
                *b += row.iter().sum::<f64>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![0.0; patch * positions];
        gemm(
            patch,
            self.out_channels,
            positions,
            1.0,
            params.get(self.weight).data(),
            true,
            dout,
            false,
            0.0,
            &mut dcols,
        );
        let dx = if self.kernel == 1 && self.stride == 1 { dcols } else { col2im(&dcols, g) };
        Some(Tensor::from_vec(&[g.in_channels, g.batch, g.height, g.width], dx))
    }
}

/// Fully connected layer on row-major `[N, in]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        role: ParamRole,
        in_features: usize,
        out_features: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let w = gaussian(rng, out_features * in_features, std);
        let weight = params.add(format!("{name}.weight"), role, Tensor::from_vec(&[out_features, in_features], w));
        let bias = params.add(format!("{name}.bias"), role, Tensor::zeros(&[out_features]));
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward(&self, params: &ParamSet, input: &[f64], rows: usize) -> Vec<f64> {
        assert_eq!(input.len(), rows * self.in_features, "linear input size mismatch");
        let mut out = vec![0.0; rows * self.out_features];
        gemm(
            rows,
            self.in_features,
            self.out_features,
            1.0,
            input,
            false,
            params.get(self.weight).data(),
            true,
            0.0,
            &mut out,
        );
        let bias = params.get(self.bias).data();
        for row in out.chunks_mut(self.out_features) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        out
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        input: &[f64],
        grad_out: &[f64],
        rows: usize,
        grads: &mut Gradients,
    ) -> Vec<f64> {
        if grads.is_active(self.weight) {
            gemm(
                self.out_features,
                rows,
                self.in_features,
                1.0,
                grad_out,
                true,
                input,
                false,
                1.0,
                grads.get_mut(self.weight).data_mut(),
            );
        }
        if grads.is_active(self.bias) {
            let db = grads.get_mut(self.bias).data_mut();
            for row in grad_out.chunks(self.out_features) {
                for (b, g) in db.iter_mut().zip(row) {
                    *b += g;
                }
            }
        }
        let mut dx = vec![0.0; rows * self.in_features];
        gemm(
            rows,
            self.out_features,
            self.in_features,
            1.0,
            grad_out,
            false,
            params.get(self.weight).data(),
            false,
            0.0,
            &mut dx,
        );
        dx
    }
}
