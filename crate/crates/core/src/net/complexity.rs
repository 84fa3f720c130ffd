//! Multiply-accumulate and parameter counts from layer dimensions.
//!
//! Both Siamese branches are counted. Bias additions and activations are not
//! MACs.

use serde::{Deserialize, Serialize};

use super::NetConfig;
use crate::media_io::PatchShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub macs: u64,
    pub params: u64,
}

/// MACs of a 3×3 convolution producing an `ho × wo` map.
pub fn conv_macs(cin: usize, cout: usize, ho: usize, wo: usize) -> u64 {
    (9 * cin * cout * ho * wo) as u64
}

pub fn conv_params(cin: usize, cout: usize) -> u64 {
    (9 * cin * cout + cout) as u64
}

/// Per position and step: step projection `E²`, B and C projections `2NE`,
/// state update and readout `3EN`, skip `E`.
fn scan_macs_per_step(e: usize, n: usize) -> u64 {
    (e * e + 2 * n * e + 3 * e * n + e) as u64
}

fn scan_params(e: usize, n: usize) -> u64 {
    (e * n + e + 2 * n * e + 2 * n + e * e + e) as u64
}

pub fn count_complexity(config: &NetConfig, shape: PatchShape) -> Complexity {
    let (mut h, mut w) = (shape.h, shape.w);
    let mut cin = config.input.channels();
    let mut branch_macs = 0u64;
    let mut params = 0u64;
    for &c in &config.channels {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        branch_macs += shape.t as u64 * conv_macs(cin, c, h, w);
        branch_macs += (shape.t * h * w) as u64 * scan_macs_per_step(c, config.state_dim);
        params += conv_params(cin, c) + scan_params(c, config.state_dim);
        cin = c;
    }
    let f = config.feature_len() as u64;
    let hd = config.head_hidden as u64;
    params += f * hd + hd + hd + 1;
    Complexity {
        macs: 2 * branch_macs + f * hd + hd,
        params,
    }
}

#[cfg(test)]
mod tests {
    use super::super::QualityNet;
    use super::*;

    #[test]
    fn single_conv_arithmetic() {
        assert_eq!(conv_macs(16, 32, 64, 64), 18_874_368);
        assert_eq!(conv_params(16, 32), 4_640);
    }

    #[test]
    fn params_match_instantiated_network() {
        for cfg in [NetConfig::default(), NetConfig::small()] {
            let net = QualityNet::zeros(&cfg).unwrap();
            assert_eq!(count_complexity(&cfg, PatchShape::DESK).params, net.param_count() as u64);
        }
    }

    #[test]
    fn default_lands_within_twice_the_published_cost() {
        let c = count_complexity(&NetConfig::default(), PatchShape::FULL);
        let (macs, params) = (c.macs as f64, c.params as f64);
        assert!(macs / 1.4e9 <= 2.0 && 1.4e9 / macs <= 2.0, "{macs}");
        assert!(params / 0.8e6 <= 2.0 && 0.8e6 / params <= 2.0, "{params}");
        assert_eq!(c.params, 739_265);
    }
}
