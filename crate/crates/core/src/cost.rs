//! Parameter and FLOP accounting.
//!
//! Convention: a convolution costs `Co·H'·W'·Ci·kh·kw` multiply-accumulates,
//! two FLOPs each, plus one FLOP per output element when it has a bias.
//! Batch norm, ReLU, pooling, bilinear upsampling and elementwise addition
//! cost one FLOP per output element. Concatenation is free.
//!
//! FLOPs on maps whose size does not depend on the input resolution (the
//! global-pooling branch) are also tallied in `fixed_flops`.

use std::ops::AddAssign;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
    pub fixed_flops: u64,
}

impl AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        self.params += rhs.params;
        self.flops += rhs.flops;
        self.fixed_flops += rhs.fixed_flops;
    }
}

impl Cost {
    pub fn conv(out_c: usize, in_c: usize, k: usize, out_hw: (usize, usize), bias: bool) -> Cost {
        let pixels = (out_hw.0 * out_hw.1) as u64;
        let (co, ci, k) = (out_c as u64, in_c as u64, k as u64);
        let macs = co * pixels * ci * k * k;
        let bias_flops = if bias { co * pixels } else { 0 };
        Cost {
            params: co * ci * k * k + if bias { co } else { 0 },
            flops: 2 * macs + bias_flops,
            fixed_flops: 0,
        }
    }

    pub fn bn(channels: usize, hw: (usize, usize)) -> Cost {
        Cost {
            params: 2 * channels as u64,
            flops: (channels * hw.0 * hw.1) as u64,
            fixed_flops: 0,
        }
    }

    /// ReLU, pooling, upsampling, addition: one FLOP per output element.
    pub fn elementwise(channels: usize, hw: (usize, usize)) -> Cost {
        Cost {
            params: 0,
            flops: (channels * hw.0 * hw.1) as u64,
            fixed_flops: 0,
        }
    }

    pub fn conv_bn(out_c: usize, in_c: usize, k: usize, out_hw: (usize, usize), relu: bool) -> Cost {
        let mut c = Cost::conv(out_c, in_c, k, out_hw, false);
        c += Cost::bn(out_c, out_hw);
        if relu {
            c += Cost::elementwise(out_c, out_hw);
        }
        c
    }

    /// Marks every FLOP of this cost as resolution independent.
    pub fn fixed(mut self) -> Cost {
        self.fixed_flops = self.flops;
        self
    }
}
