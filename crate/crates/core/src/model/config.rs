use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};
use crate::roialign::RoiGrid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Residual block kernel; 0 skips the block.
    pub residual_kernel: usize,
    pub hidden_units: usize,
}

/// Shape of the ensemble: a trunk of `stage_channels.len()` stride-2 stages
/// (conv3x3 → relu → 2×2 max pool each), RoIAlign to `roi`, and one head per
/// region class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub num_regions: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub roi: RoiGrid,
    pub head: HeadConfig,
}

impl EnsembleConfig {
    /// 448 px input, four stages, 28×28 feature map.
    pub fn paper(num_classes: usize, num_regions: usize) -> Self {
        Self {
            num_regions,
            num_classes,
            input_size: 448,
            stage_channels: vec![32, 64, 128, 256],
            roi: RoiGrid::default(),
            head: HeadConfig {
                residual_kernel: 3,
                hidden_units: 256,
            },
        }
    }

    /// 128 px input, three stages, 16×16 feature map.
    pub fn desk(num_classes: usize, num_regions: usize) -> Self {
        Self {
            num_regions,
            num_classes,
            input_size: 128,
            stage_channels: vec![8, 16, 16],
            roi: RoiGrid::default(),
            head: HeadConfig {
                residual_kernel: 3,
                hidden_units: 32,
            },
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(3)
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.stride()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_regions < 1 {
            return bad("need at least one region head".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.stage_channels.contains(&0) {
            return bad("stage channel widths must be positive".into());
        }
        if self.stage_channels.len() >= usize::BITS as usize - 1 {
            return bad("too many stages".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.stride()) {
            return bad(format!(
                "input size {} is not divisible by stride {}",
                self.input_size,
                self.stride()
            ));
        }
        if self.head.hidden_units == 0 {
            return bad("head hidden_units must be positive".into());
        }
        if self.head.residual_kernel.is_multiple_of(2) && self.head.residual_kernel != 0 {
            return bad("head residual_kernel must be odd".into());
        }
        self.roi.validate()
    }

    pub fn trunk_network(&self) -> Result<Network> {
        self.validate()?;
        let mut layers = Vec::new();
        let mut c_in = 3;
        for &c in &self.stage_channels {
            layers.push(LayerSpec::conv3x3(c_in, c));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool2x2);
            c_in = c;
        }
        Network::new(vec![3, self.input_size, self.input_size], layers)
    }

    pub fn head_network(&self) -> Result<Network> {
        self.validate()?;
        let c = self.feature_channels();
        let mut layers = Vec::new();
        if self.head.residual_kernel > 0 {
            layers.push(LayerSpec::ResidualBlock {
                channels: c,
                kernel: self.head.residual_kernel,
            });
            layers.push(LayerSpec::Relu);
        }
        layers.extend([
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense {
                inputs: c,
                units: self.head.hidden_units,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: self.head.hidden_units,
                units: self.num_classes,
            },
            LayerSpec::Softmax,
        ]);
        Network::new(vec![c, self.roi.out_h, self.roi.out_w], layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_feature_sizes() {
        let p = EnsembleConfig::paper(200, 7);
        assert_eq!(p.feature_size(), 28);
        assert_eq!(p.trunk_network().unwrap().output_shape().unwrap(), [256, 28, 28]);
        let d = EnsembleConfig::desk(4, 3);
        assert_eq!(d.trunk_network().unwrap().output_shape().unwrap(), [16, 16, 16]);
        assert_eq!(d.head_network().unwrap().output_shape().unwrap(), [4]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = EnsembleConfig::desk(4, 3);
        c.input_size = 100;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = EnsembleConfig::desk(1, 3);
        assert!(c.validate().is_err());
        c.num_classes = 3;
        c.num_regions = 0;
        assert!(c.validate().is_err());
    }
}
