use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One convolutional channel plus two dense encoders.
    SingleChannel,
    /// Main and narrower auxiliary channels merged by concatenation.
    DualChannel,
    /// Dual channel with a softmax therapy-topic head on the auxiliary encoding.
    DualChannelAux,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SingleChannel, Variant::DualChannel, Variant::DualChannelAux];

    pub fn has_aux_channel(self) -> bool {
        !matches!(self, Variant::SingleChannel)
    }

    pub fn has_topic_head(self) -> bool {
        matches!(self, Variant::DualChannelAux)
    }

    /// Command-line name: `1cnn`, `2cnn` or `2cnn-aux`.
    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::SingleChannel => "1cnn",
            Variant::DualChannel => "2cnn",
            Variant::DualChannelAux => "2cnn-aux",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1cnn" => Ok(Variant::SingleChannel),
            "2cnn" => Ok(Variant::DualChannel),
            "2cnn-aux" => Ok(Variant::DualChannelAux),
            other => Err(Error::config("variant", format!("unknown variant `{other}` (1cnn, 2cnn, 2cnn-aux)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutRates {
    pub main: f64,
    pub aux: f64,
    pub merge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub main_kernels: usize,
    pub aux_kernels: usize,
    pub kernel_size: (usize, usize),
    pub pool_size: (usize, usize),
    pub conv_blocks: usize,
    pub main_encode_width: usize,
    pub aux_encode_width: usize,
    pub merge_width: usize,
    pub dropout: DropoutRates,
    pub herb_count: usize,
    pub topic_count: Option<usize>,
}

impl ArchitectureSpec {
    /// Full-size network: 224x224 input, 80/40 kernels, 160/80/256 widths.
    pub fn paper(variant: Variant, herb_count: usize, topic_count: Option<usize>) -> Self {
        ArchitectureSpec {
            variant,
            height: 224,
            width: 224,
            channels: 3,
            main_kernels: 80,
            aux_kernels: 40,
            kernel_size: (3, 3),
            pool_size: (2, 2),
            conv_blocks: 3,
            main_encode_width: 160,
            aux_encode_width: 80,
            merge_width: 256,
            dropout: DropoutRates { main: 0.5, aux: 0.5, merge: 0.6 },
            herb_count,
            topic_count: if variant.has_topic_head() { topic_count } else { None },
        }
    }

    /// Desk-scale network: 32x32 input, 8/4 kernels, 32/16/48 widths.
    pub fn mini(variant: Variant, herb_count: usize, topic_count: Option<usize>) -> Self {
        ArchitectureSpec {
            height: 32,
            width: 32,
            main_kernels: 8,
            aux_kernels: 4,
            main_encode_width: 32,
            aux_encode_width: 16,
            merge_width: 48,
            ..Self::paper(variant, herb_count, topic_count)
        }
    }

    pub fn preset(name: &str, variant: Variant, herb_count: usize, topic_count: Option<usize>) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(variant, herb_count, topic_count)),
            "mini" => Ok(Self::mini(variant, herb_count, topic_count)),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (paper, mini)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("main_kernels", self.main_kernels),
            ("conv_blocks", self.conv_blocks),
            ("main_encode_width", self.main_encode_width),
            ("merge_width", self.merge_width),
            ("herb_count", self.herb_count),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.variant.has_aux_channel() {
            if self.aux_kernels == 0 {
                return Err(Error::config("aux_kernels", "must be positive"));
            }
            if self.aux_encode_width == 0 {
                return Err(Error::config("aux_encode_width", "must be positive"));
            }
        }
        let (kh, kw) = self.kernel_size;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config("kernel_size", "extents must be odd"));
        }
        if self.pool_size != (2, 2) {
            return Err(Error::config("pool_size", "only (2, 2) pooling is supported"));
        }
        let div = 1usize << self.conv_blocks.min(30);
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::config(
                "height/width",
                format!("{}x{} not divisible by 2^{}", self.height, self.width, self.conv_blocks),
            ));
        }
        for (field, r) in [
            ("dropout.main", self.dropout.main),
            ("dropout.aux", self.dropout.aux),
            ("dropout.merge", self.dropout.merge),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        match (self.variant.has_topic_head(), self.topic_count) {
            (true, None) | (true, Some(0)) => {
                Err(Error::config("topic_count", "required (positive) for the aux variant"))
            }
            (false, Some(_)) => Err(Error::config("topic_count", "only allowed for the aux variant")),
            _ => Ok(()),
        }
    }

    /// Spatial extent after all conv/pool blocks.
    pub fn pooled_extent(&self) -> (usize, usize) {
        (self.height >> self.conv_blocks, self.width >> self.conv_blocks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for v in Variant::ALL {
            let topics = v.has_topic_head().then_some(8);
            ArchitectureSpec::paper(v, 566, topics).validate().unwrap();
            ArchitectureSpec::mini(v, 40, topics).validate().unwrap();
        }
        assert_eq!(ArchitectureSpec::paper(Variant::DualChannel, 10, None).pooled_extent(), (28, 28));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = ArchitectureSpec::mini(Variant::DualChannelAux, 40, None);
        assert!(s.validate().is_err());
        s.topic_count = Some(8);
        s.height = 30;
        assert!(s.validate().is_err());
        let mut s = ArchitectureSpec::mini(Variant::SingleChannel, 40, None);
        s.topic_count = Some(3);
        assert!(s.validate().is_err());
        let mut s = ArchitectureSpec::mini(Variant::SingleChannel, 40, None);
        s.merge_width = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.cli_name().parse::<Variant>().unwrap(), v);
        }
        assert!("3cnn".parse::<Variant>().is_err());
    }
}
