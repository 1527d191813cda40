use serde::{Deserialize, Serialize};

use crate::archgraph::OpKind;
use crate::error::{Error, Result};

/// How attention logits are biased by graph structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// MLP over concatenated forward and backward distance embeddings.
    Ghn3,
    /// A single distance table looked up per pair.
    Graphormer,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GhnConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_dist: usize,
    pub max_deg: usize,
    pub use_sa: bool,
    pub use_fw_edges: bool,
    pub use_bw_edges: bool,
    pub use_centrality: bool,
    pub use_input_dist: bool,
    /// Separate edge-bias parameters in every layer instead of one shared set.
    pub per_layer_bias: bool,
    pub decoder_spatial: usize,
    pub decoder_channel_mult: usize,
    /// Hidden width of the decoder expansion per spatial position; 0 means `hidden`.
    pub decoder_hidden: usize,
    /// Parametric ops whose tensors are predicted; others fall back to
    /// random initialisation.
    pub supported_ops: Vec<OpKind>,
    pub seed: u64,
}

impl Default for GhnConfig {
    fn default() -> Self {
        Self::preset("T").unwrap()
    }
}

impl GhnConfig {
    /// Model-size presets `T`, `S`, `L` and `XL`.
    pub fn preset(name: &str) -> Option<GhnConfig> {
        let (layers, hidden, heads) = match name.to_ascii_uppercase().as_str() {
            "T" => (3, 64, 8),
            "S" => (5, 128, 16),
            "L" => (12, 256, 16),
            "XL" => (24, 384, 16),
            _ => return None,
        };
        Some(GhnConfig {
            layers,
            hidden,
            heads,
            max_dist: 16,
            max_deg: 16,
            use_sa: true,
            use_fw_edges: true,
            use_bw_edges: true,
            use_centrality: true,
            use_input_dist: true,
            per_layer_bias: false,
            decoder_spatial: 16,
            decoder_channel_mult: 1,
            decoder_hidden: 0,
            supported_ops: vec![
                OpKind::Conv2d,
                OpKind::Linear,
                OpKind::BatchNorm,
                OpKind::ClassifierHead,
            ],
            seed: 0,
        })
    }

    /// Checks a user-supplied configuration.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return bad("hidden must be a positive multiple of heads");
        }
        if self.max_dist == 0 || self.max_deg == 0 {
            return bad("max_dist and max_deg must be positive");
        }
        if self.decoder_spatial == 0 {
            return bad("decoder_spatial must be positive");
        }
        if ![1, 2, 4].contains(&self.decoder_channel_mult) {
            return bad("decoder_channel_mult must be 1, 2 or 4");
        }
        if self.supported_ops.iter().any(|op| !op.is_parametric()) {
            return bad("supported_ops may only list parametric ops");
        }
        Ok(())
    }

    pub fn edge_mode(&self) -> EdgeMode {
        match (self.use_sa, self.use_fw_edges, self.use_bw_edges) {
            (false, _, _) | (true, false, false) => EdgeMode::None,
            (true, true, true) => EdgeMode::Ghn3,
            _ => EdgeMode::Graphormer,
        }
    }

    /// Channel extent `c * d` of the decoded tensor.
    pub fn decoder_channels(&self) -> usize {
        self.decoder_channel_mult * self.hidden
    }

    pub fn decoder_hidden(&self) -> usize {
        if self.decoder_hidden == 0 {
            self.hidden
        } else {
            self.decoder_hidden
        }
    }

    pub fn supports(&self, op: OpKind) -> bool {
        self.supported_ops.contains(&op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let dims = |n: &str| {
            let c = GhnConfig::preset(n).unwrap();
            (c.layers, c.hidden, c.heads)
        };
        assert_eq!(dims("T"), (3, 64, 8));
        assert_eq!(dims("S"), (5, 128, 16));
        assert_eq!(dims("L"), (12, 256, 16));
        assert_eq!(dims("XL"), (24, 384, 16));
        for n in ["T", "S", "L", "XL"] {
            GhnConfig::preset(n).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn edge_modes() {
        let mut c = GhnConfig::default();
        assert_eq!(c.edge_mode(), EdgeMode::Ghn3);
        c.use_bw_edges = false;
        assert_eq!(c.edge_mode(), EdgeMode::Graphormer);
        c.use_fw_edges = false;
        assert_eq!(c.edge_mode(), EdgeMode::None);
        c.use_bw_edges = true;
        assert_eq!(c.edge_mode(), EdgeMode::Graphormer);
        c.use_sa = false;
        assert_eq!(c.edge_mode(), EdgeMode::None);
    }

    #[test]
    fn rejects_bad_head_split() {
        let c = GhnConfig {
            heads: 5,
            ..GhnConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
