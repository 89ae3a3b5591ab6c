//! Architecture hyperparameters and token-grid arithmetic.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Embedding width per attention head; the embedding dimension is always
/// `64 * n_heads`.
pub const HEAD_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConviformerConfig {
    pub n_heads: usize,
    pub d_emb: usize,
    pub n_gpsa_layers: usize,
    pub n_sa_layers: usize,
    pub patch_size: usize,
    pub base_res: usize,
    pub conv_channels: usize,
    pub ffn_expansion: usize,
    pub n_taxa: usize,
    pub n_genus: usize,
    pub n_family: usize,
    pub emb_dim_taxa: usize,
    pub emb_dim_genus: usize,
    pub emb_dim_family: usize,
    /// Hidden width of the genus/family classification MLPs.
    pub head_hidden: usize,
    pub dropout: f64,
    /// false = plain ConViT mode: no conv frontend, patches straight off the
    /// 3-channel image, downsample factor pinned to 1.
    pub use_frontend: bool,
}

impl Default for ConviformerConfig {
    /// The base variant: 16 heads, 10 GPSA + 2 SA layers, 16px patches at a
    /// 224px base resolution, 64-channel frontend. The embedding width
    /// follows the 64-per-head rule.
    fn default() -> Self {
        ConviformerConfig {
            n_heads: 16,
            d_emb: 1024,
            n_gpsa_layers: 10,
            n_sa_layers: 2,
            patch_size: 16,
            base_res: 224,
            conv_channels: 64,
            ffn_expansion: 4,
            n_taxa: 15501,
            n_genus: 2564,
            n_family: 272,
            emb_dim_taxa: 512,
            emb_dim_genus: 128,
            emb_dim_family: 128,
            head_hidden: 512,
            dropout: 0.0,
            use_frontend: true,
        }
    }
}

impl ConviformerConfig {
    /// Desk-scale variant used by the validation suites: 4 heads, 256-dim,
    /// 2 GPSA + 1 SA, 8px patches at a 32px base.
    pub fn tiny(n_taxa: usize, n_genus: usize, n_family: usize) -> Self {
        ConviformerConfig {
            n_heads: 4,
            d_emb: 256,
            n_gpsa_layers: 2,
            n_sa_layers: 1,
            patch_size: 8,
            base_res: 32,
            conv_channels: 64,
            ffn_expansion: 4,
            n_taxa,
            n_genus,
            n_family,
            emb_dim_taxa: 64,
            emb_dim_genus: 32,
            emb_dim_family: 32,
            head_hidden: 64,
            dropout: 0.0,
            use_frontend: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |detail: String| Err(ModelError::Config { detail });
        if self.d_emb != HEAD_DIM * self.n_heads {
            return fail(format!(
                "d_emb must be {HEAD_DIM}*n_heads = {}, got {}",
                HEAD_DIM * self.n_heads,
                self.d_emb
            ));
        }
        if self.n_heads == 0 || self.d_emb % self.n_heads != 0 {
            return fail(format!("d_emb {} not divisible by n_heads {}", self.d_emb, self.n_heads));
        }
        if self.patch_size == 0 || self.base_res % self.patch_size != 0 {
            return fail(format!(
                "base_res {} not divisible by patch_size {}",
                self.base_res, self.patch_size
            ));
        }
        if self.n_taxa == 0 || self.n_genus == 0 || self.n_family == 0 {
            return fail("class counts must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ffn_expansion == 0 || self.conv_channels == 0 {
            return fail("ffn_expansion and conv_channels must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.n_heads
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let cfg: ConviformerConfig = toml::from_str(text)
            .map_err(|e| ModelError::Config { detail: format!("config parse: {e}") })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// `max(1, floor(h / base_res))`: sub-base inputs degrade to no reduction.
pub fn downsample_factor(h: usize, base_res: usize) -> usize {
    (h / base_res.max(1)).max(1)
}

/// Token-grid geometry for one input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub d_s: usize,
    pub h_prime: usize,
    pub w_prime: usize,
    /// Patches per axis.
    pub grid_h: usize,
    pub grid_w: usize,
    /// Token (sequence) count.
    pub t_p: usize,
}

impl PatchGrid {
    pub fn new(h: usize, w: usize, patch_size: usize, d_s: usize) -> Result<Self, ModelError> {
        let h_prime = h / d_s;
        let w_prime = w / d_s;
        if h_prime < patch_size || w_prime < patch_size {
            return Err(ModelError::Config {
                detail: format!(
                    "input {h}x{w} reduces to {h_prime}x{w_prime}, smaller than one {patch_size}px patch"
                ),
            });
        }
        let grid_h = h_prime / patch_size;
        let grid_w = w_prime / patch_size;
        Ok(PatchGrid {
            d_s,
            h_prime,
            w_prime,
            grid_h,
            grid_w,
            t_p: grid_h * grid_w,
        })
    }

    /// Grid with the frontend reduction active.
    pub fn conviformer(h: usize, w: usize, cfg: &ConviformerConfig) -> Result<Self, ModelError> {
        Self::new(h, w, cfg.patch_size, downsample_factor(h, cfg.base_res))
    }

    /// Grid with the reduction pinned to 1 (plain ConViT).
    pub fn convit(h: usize, w: usize, cfg: &ConviformerConfig) -> Result<Self, ModelError> {
        Self::new(h, w, cfg.patch_size, 1)
    }

    pub fn for_mode(h: usize, w: usize, cfg: &ConviformerConfig) -> Result<Self, ModelError> {
        if cfg.use_frontend {
            Self::conviformer(h, w, cfg)
        } else {
            Self::convit(h, w, cfg)
        }
    }
}

/// Sequence length for an input, honoring the config's mode.
pub fn patch_count(h: usize, w: usize, cfg: &ConviformerConfig) -> Result<usize, ModelError> {
    Ok(PatchGrid::for_mode(h, w, cfg)?.t_p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_factor_formula() {
        assert_eq!(downsample_factor(448, 224), 2);
        assert_eq!(downsample_factor(224, 224), 1);
        assert_eq!(downsample_factor(600, 224), 2);
        // clamped for sub-base inputs
        assert_eq!(downsample_factor(100, 224), 1);
    }

    #[test]
    fn sequence_lengths_by_resolution() {
        let cfg = ConviformerConfig::default();
        // frontend active
        for (res, expect) in [(448, 196), (512, 256), (600, 324)] {
            assert_eq!(patch_count(res, res, &cfg).unwrap(), expect, "conviformer @ {res}");
        }
        // reduction pinned to 1
        let convit = ConviformerConfig { use_frontend: false, ..cfg };
        for (res, expect) in [(224, 196), (448, 784), (512, 1024), (600, 1369)] {
            assert_eq!(patch_count(res, res, &convit).unwrap(), expect, "convit @ {res}");
        }
    }

    #[test]
    fn single_patch_input() {
        let cfg = ConviformerConfig::tiny(4, 2, 1);
        // h = w = patch_size * d_s: 8 * 2 = 16 with base_res forced low
        let grid = PatchGrid::new(16, 16, 8, 2).unwrap();
        assert_eq!(grid.t_p, 1);
        // and smaller than one patch errors
        assert!(PatchGrid::new(8, 8, 8, 2).is_err());
        let _ = cfg;
    }

    #[test]
    fn odd_extent_uses_floor_per_axis() {
        // 600/. with base 224: d_s = 2, h' = 300, 300/16 = 18 -> 324 tokens
        let grid = PatchGrid::new(600, 600, 16, 2).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w, grid.t_p), (18, 18, 324));
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = ConviformerConfig::default();
        cfg.d_emb = 512; // != 64 * 16
        assert!(cfg.validate().is_err());

        let mut cfg = ConviformerConfig::default();
        cfg.base_res = 225;
        assert!(cfg.validate().is_err());

        assert!(ConviformerConfig::default().validate().is_ok());
        assert!(ConviformerConfig::tiny(36, 12, 4).validate().is_ok());
    }

    #[test]
    fn toml_roundtrip_and_defaults() {
        let cfg = ConviformerConfig::tiny(36, 12, 4);
        let text = cfg.to_toml();
        let back = ConviformerConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);

        // sparse file relies on defaults
        let sparse = "n_taxa = 8\nn_genus = 4\nn_family = 2\n";
        let cfg = ConviformerConfig::from_toml(sparse).unwrap();
        assert_eq!(cfg.n_heads, 16);
        assert_eq!(cfg.n_taxa, 8);

        assert!(ConviformerConfig::from_toml("d_emb = 100").is_err());
        assert!(ConviformerConfig::from_toml("not toml [[").is_err());
    }
}
