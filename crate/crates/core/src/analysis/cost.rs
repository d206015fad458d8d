use crate::autodiff::MembershipKind;
use crate::error::{dim_err, Result};
use crate::kernels::conv_out_extent;

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Multiplications of a membership encoder: one per pixel and function for
/// triangles, two for Gaussians.
pub fn fuzzy_encoder_multiplications(kind: MembershipKind, c: usize, n: usize, h: usize, w: usize) -> u64 {
    let per = match kind {
        MembershipKind::Triangular => 1,
        MembershipKind::Gaussian => 2,
    };
    per * (c * n * h * w) as u64
}

/// `c_out·c·l²·h_out·w_out` for one frame.
pub fn conv_multiplications(conv: &ConvSpec, c: usize, h: usize, w: usize) -> Result<u64> {
    let ho = conv_out_extent(h, conv.kernel, conv.stride, conv.padding);
    let wo = conv_out_extent(w, conv.kernel, conv.stride, conv.padding);
    match (ho, wo) {
        (Some(ho), Some(wo)) => Ok((conv.out_channels * c * conv.kernel * conv.kernel * ho * wo) as u64),
        _ => dim_err(format!("kernel {} does not fit a {h}x{w} input", conv.kernel)),
    }
}

/// Extra multiplications of a population decoder over a plain readout.
pub fn decoder_overhead(m: usize, actions: usize) -> u64 {
    (m * actions) as u64
}

/// Per-frame multiplication counts of the input stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub fuzzy_encoder: u64,
    pub rate_encoder: u64,
    /// First convolution applied to the raw `C`-channel image.
    pub first_conv_raw: u64,
    /// First convolution applied to the `N·C` fuzzy channels.
    pub first_conv_fuzzy: u64,
    pub decoder_overhead: u64,
}

pub fn cost_model(
    shape: (usize, usize, usize),
    conv: &ConvSpec,
    n: usize,
    m: usize,
    actions: usize,
) -> Result<CostReport> {
    let (c, h, w) = shape;
    Ok(CostReport {
        fuzzy_encoder: fuzzy_encoder_multiplications(MembershipKind::Triangular, c, n, h, w),
        rate_encoder: 0,
        first_conv_raw: conv_multiplications(conv, c, h, w)?,
        first_conv_fuzzy: conv_multiplications(conv, n * c, h, w)?,
        decoder_overhead: decoder_overhead(m, actions),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAME3: ConvSpec = ConvSpec {
        out_channels: 8,
        kernel: 3,
        stride: 1,
        padding: 1,
    };

    #[test]
    fn hand_values() {
        let r = cost_model((3, 8, 8), &SAME3, 3, 5, 5).unwrap();
        assert_eq!(r.fuzzy_encoder, 576);
        assert_eq!(r.first_conv_raw, 13824);
        assert_eq!(r.rate_encoder, 0);
        assert_eq!(r.decoder_overhead, 25);
    }

    #[test]
    fn encoder_cheaper_than_first_conv() {
        for c in 1..4 {
            for hw in [4, 8, 16, 32, 64] {
                for out in [4, 8, 16] {
                    for l in [1, 3, 5] {
                        let conv = ConvSpec {
                            out_channels: out,
                            kernel: l,
                            stride: 1,
                            padding: l / 2,
                        };
                        if 3 >= out * l * l {
                            continue;
                        }
                        let r = cost_model((c, hw, hw), &conv, 3, 5, 5).unwrap();
                        assert!(r.fuzzy_encoder < r.first_conv_raw, "{c} {hw} {out} {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_kernel_is_an_error() {
        let conv = ConvSpec {
            out_channels: 1,
            kernel: 7,
            stride: 1,
            padding: 0,
        };
        assert!(conv_multiplications(&conv, 1, 4, 4).is_err());
    }
}
