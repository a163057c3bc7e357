//! Channel-attention gates: ECA (1-D convolution over pooled channel
//! statistics) and a squeeze/excitation bottleneck.
//!
//! Both take a `[B, H, W, C]` map, compute one gate value per (batch,
//! channel) from the spatially pooled features, squash it through a sigmoid,
//! and rescale the map. They differ only in how the pooled vector is mixed:
//! ECA uses a tiny shared 1-D kernel sliding across neighbouring channels
//! (3 parameters in total), squeeze/excitation a two-layer bottleneck MLP.

use crate::error::{shape_err, Result};
use crate::tensor::{gelu, gelu_grad, global_avg_pool, sigmoid, RealTensor};

// ── ECA ───────────────────────────────────────────────────────────────────

/// Efficient channel attention: a single 1-D kernel shared by all channels.
#[derive(Debug, Clone)]
pub struct EcaParams {
    /// `[3]`: cross-channel kernel, zero-padded at both channel ends.
    pub kernel: RealTensor,
}

impl EcaParams {
    pub fn zeros() -> Self {
        EcaParams {
            kernel: RealTensor::zeros(&[3]),
        }
    }

    pub fn num_params(&self) -> usize {
        self.kernel.len()
    }
}

pub struct EcaCache {
    /// `[B, C]` pooled input.
    pooled: RealTensor,
    /// `[B, C]` sigmoid gates.
    gate: RealTensor,
}

/// `y[b,h,w,c] = x[b,h,w,c] * sigmoid(conv1d(mean_hw(x))[b,c])`.
pub fn eca_forward(x: &RealTensor, p: &EcaParams) -> Result<RealTensor> {
    Ok(eca_forward_cached(x, p)?.0)
}

pub fn eca_forward_cached(x: &RealTensor, p: &EcaParams) -> Result<(RealTensor, EcaCache)> {
    if x.rank() != 4 {
        shape_err!("channel attention expects [B, H, W, C], got {:?}", x.shape());
    }
    let pooled = global_avg_pool(x)?;
    let (b, c) = (pooled.shape()[0], pooled.shape()[1]);
    let k = p.kernel.data();
    let mut gate = RealTensor::zeros(&[b, c]);
    for bi in 0..b {
        let s = &pooled.data()[bi * c..(bi + 1) * c];
        for ci in 0..c {
            let mut acc = 0.0;
            for (j, &kj) in k.iter().enumerate() {
                let src = ci + j;
                // Kernel tap j reads channel ci + j - 1; taps that fall off
                // either end of the channel axis contribute zero.
                if src >= 1 && src <= c {
                    acc += kj * s[src - 1];
                }
            }
            gate.data_mut()[bi * c + ci] = sigmoid(acc);
        }
    }
    let mut y = x.clone();
    scale_by_gate(&mut y, &gate);
    Ok((y, EcaCache { pooled, gate }))
}

/// Gradients of [`eca_forward`] with respect to the input and the kernel.
pub fn eca_backward(
    x: &RealTensor,
    p: &EcaParams,
    grad_out: &RealTensor,
) -> Result<(RealTensor, EcaParams)> {
    let (_, cache) = eca_forward_cached(x, p)?;
    eca_backward_with_cache(x, p, grad_out, &cache)
}

pub fn eca_backward_with_cache(
    x: &RealTensor,
    p: &EcaParams,
    grad_out: &RealTensor,
    cache: &EcaCache,
) -> Result<(RealTensor, EcaParams)> {
    if grad_out.shape() != x.shape() {
        shape_err!(
            "gate grad {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        );
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hw = (h * w) as f64;

    // dx from the direct scaling path plus d(gate) collected per channel.
    let mut dx = grad_out.clone();
    scale_by_gate(&mut dx, &cache.gate);
    let mut dgate = RealTensor::zeros(&[b, c]);
    for bi in 0..b {
        for pix in 0..h * w {
            let base = (bi * h * w + pix) * c;
            for ci in 0..c {
                dgate.data_mut()[bi * c + ci] += grad_out.data()[base + ci] * x.data()[base + ci];
            }
        }
    }

    // Through the sigmoid into the conv, then into kernel and pooled input.
    let mut grads = EcaParams::zeros();
    let mut dpool = RealTensor::zeros(&[b, c]);
    for bi in 0..b {
        let s = &cache.pooled.data()[bi * c..(bi + 1) * c];
        for ci in 0..c {
            let g = cache.gate.data()[bi * c + ci];
            let dt = dgate.data()[bi * c + ci] * g * (1.0 - g);
            for j in 0..3 {
                let src = ci + j;
                if src >= 1 && src <= c {
                    grads.kernel.data_mut()[j] += dt * s[src - 1];
                    dpool.data_mut()[bi * c + src - 1] += dt * p.kernel.data()[j];
                }
            }
        }
    }

    // Pooling spreads each channel mean gradient evenly over the pixels.
    for bi in 0..b {
        for pix in 0..h * w {
            let base = (bi * h * w + pix) * c;
            for ci in 0..c {
                dx.data_mut()[base + ci] += dpool.data()[bi * c + ci] / hw;
            }
        }
    }
    Ok((dx, grads))
}

// ── Squeeze / excitation ──────────────────────────────────────────────────

/// Squeeze-and-excitation gate: pooled channels through a bottleneck MLP.
#[derive(Debug, Clone)]
pub struct SeParams {
    /// `[C, C/r]` squeeze projection.
    pub w1: RealTensor,
    /// `[C/r]`.
    pub b1: RealTensor,
    /// `[C/r, C]` excitation projection.
    pub w2: RealTensor,
    /// `[C]`.
    pub b2: RealTensor,
}

impl SeParams {
    /// Zero parameters with bottleneck width `channels / reduction`.
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            shape_err!("{channels} channels cannot reduce by a factor of {reduction}");
        }
        let hidden = channels / reduction;
        Ok(SeParams {
            w1: RealTensor::zeros(&[channels, hidden]),
            b1: RealTensor::zeros(&[hidden]),
            w2: RealTensor::zeros(&[hidden, channels]),
            b2: RealTensor::zeros(&[channels]),
        })
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

pub struct SeCache {
    pooled: RealTensor,
    /// `[B, C/r]` pre-activation of the squeeze layer.
    hidden_pre: RealTensor,
    gate: RealTensor,
}

/// `y = x * sigmoid(w2 . gelu(w1 . mean_hw(x) + b1) + b2)` per channel.
pub fn se_forward(x: &RealTensor, p: &SeParams) -> Result<RealTensor> {
    Ok(se_forward_cached(x, p)?.0)
}

pub fn se_forward_cached(x: &RealTensor, p: &SeParams) -> Result<(RealTensor, SeCache)> {
    if x.rank() != 4 {
        shape_err!("channel attention expects [B, H, W, C], got {:?}", x.shape());
    }
    let pooled = global_avg_pool(x)?;
    let (b, c) = (pooled.shape()[0], pooled.shape()[1]);
    let hidden = p.w1.shape()[1];
    if p.w1.shape()[0] != c {
        shape_err!(
            "squeeze weights cover {} channels but input carries {}",
            p.w1.shape()[0],
            c
        );
    }
    let mut hidden_pre = RealTensor::zeros(&[b, hidden]);
    for bi in 0..b {
        for o in 0..hidden {
            let mut acc = p.b1.data()[o];
            for k in 0..c {
                acc += pooled.data()[bi * c + k] * p.w1.data()[k * hidden + o];
            }
            hidden_pre.data_mut()[bi * hidden + o] = acc;
        }
    }
    let mut gate = RealTensor::zeros(&[b, c]);
    for bi in 0..b {
        for o in 0..c {
            let mut acc = p.b2.data()[o];
            for k in 0..hidden {
                acc += gelu(hidden_pre.data()[bi * hidden + k]) * p.w2.data()[k * c + o];
            }
            gate.data_mut()[bi * c + o] = sigmoid(acc);
        }
    }
    let mut y = x.clone();
    scale_by_gate(&mut y, &gate);
    Ok((
        y,
        SeCache {
            pooled,
            hidden_pre,
            gate,
        },
    ))
}

pub fn se_backward(
    x: &RealTensor,
    p: &SeParams,
    grad_out: &RealTensor,
) -> Result<(RealTensor, SeParams)> {
    let (_, cache) = se_forward_cached(x, p)?;
    se_backward_with_cache(x, p, grad_out, &cache)
}

pub fn se_backward_with_cache(
    x: &RealTensor,
    p: &SeParams,
    grad_out: &RealTensor,
    cache: &SeCache,
) -> Result<(RealTensor, SeParams)> {
    if grad_out.shape() != x.shape() {
        shape_err!(
            "gate grad {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        );
    }
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hidden = p.w1.shape()[1];
    let hw = (h * w) as f64;

    let mut dx = grad_out.clone();
    scale_by_gate(&mut dx, &cache.gate);
    let mut dgate = RealTensor::zeros(&[b, c]);
    for bi in 0..b {
        for pix in 0..h * w {
            let base = (bi * h * w + pix) * c;
            for ci in 0..c {
                dgate.data_mut()[bi * c + ci] += grad_out.data()[base + ci] * x.data()[base + ci];
            }
        }
    }

    let mut grads = SeParams::zeros(c, c / hidden)?;
    let mut dpool = RealTensor::zeros(&[b, c]);
    for bi in 0..b {
        // Sigmoid then the excitation layer.
        let mut dz2 = vec![0.0; c];
        for o in 0..c {
            let g = cache.gate.data()[bi * c + o];
            dz2[o] = dgate.data()[bi * c + o] * g * (1.0 - g);
            grads.b2.data_mut()[o] += dz2[o];
        }
        let mut dact = vec![0.0; hidden];
        for k in 0..hidden {
            let a = gelu(cache.hidden_pre.data()[bi * hidden + k]);
            for o in 0..c {
                grads.w2.data_mut()[k * c + o] += a * dz2[o];
                dact[k] += p.w2.data()[k * c + o] * dz2[o];
            }
        }
        // GELU then the squeeze layer.
        for k in 0..hidden {
            let dz1 = dact[k] * gelu_grad(cache.hidden_pre.data()[bi * hidden + k]);
            grads.b1.data_mut()[k] += dz1;
            for ci in 0..c {
                grads.w1.data_mut()[ci * hidden + k] += cache.pooled.data()[bi * c + ci] * dz1;
                dpool.data_mut()[bi * c + ci] += p.w1.data()[ci * hidden + k] * dz1;
            }
        }
    }

    for bi in 0..b {
        for pix in 0..h * w {
            let base = (bi * h * w + pix) * c;
            for ci in 0..c {
                dx.data_mut()[base + ci] += dpool.data()[bi * c + ci] / hw;
            }
        }
    }
    Ok((dx, grads))
}

/// Multiplies every pixel of `[B, H, W, C]` by its `[B, C]` gate.
fn scale_by_gate(x: &mut RealTensor, gate: &RealTensor) {
    let (b, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    for bi in 0..b {
        for pix in 0..h * w {
            let base = (bi * h * w + pix) * c;
            for ci in 0..c {
                x.data_mut()[base + ci] *= gate.data()[bi * c + ci];
            }
        }
    }
}

// ── Tests ─────────────────────────────────────────────────────────────────
