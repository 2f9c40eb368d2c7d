use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, Result};

/// Architecture of one SwinFi model.
///
/// Extents are `[subcarrier, time]`; windows are measured in patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch: [usize; 2],
    pub window: [usize; 2],
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    /// Input extents `[S, T]`.
    pub input: [usize; 2],
}

fn default_head_dim() -> usize {
    16
}

fn default_mlp_ratio() -> usize {
    4
}

/// Geometry of one encoder/decoder stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub grid: [usize; 2],
    /// Window after clamping to the grid.
    pub window: [usize; 2],
    /// Cyclic shift used by the odd blocks; zero where the window spans the grid.
    pub shift: [usize; 2],
}

impl StageGeometry {
    pub fn tokens(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn window_tokens(&self) -> usize {
        self.window[0] * self.window[1]
    }

    pub fn windows(&self) -> usize {
        self.tokens() / self.window_tokens()
    }
}

impl ModelConfig {
    /// The default rectangular layout: 8×1 patches, 1×16 windows, 4×256×256 input.
    pub fn swinfi(embed_dim: usize, depths: &[usize], in_channels: usize) -> Self {
        Self {
            patch: [8, 1],
            window: [1, 16],
            embed_dim,
            depths: depths.to_vec(),
            head_dim: default_head_dim(),
            mlp_ratio: default_mlp_ratio(),
            n_classes: 21,
            in_channels,
            input: [256, 256],
        }
    }

    pub fn n_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn heads(&self) -> usize {
        self.embed_dim / self.head_dim
    }

    /// Patch grid of the embedding stage.
    pub fn patch_grid(&self) -> [usize; 2] {
        [self.input[0] / self.patch[0], self.input[1] / self.patch[1]]
    }

    pub fn patch_features(&self) -> usize {
        self.patch[0] * self.patch[1] * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        let positive = self.patch.iter().chain(&self.window).chain(&self.input).all(|&v| v > 0)
            && self.embed_dim > 0
            && self.head_dim > 0
            && self.mlp_ratio > 0
            && self.n_classes > 0
            && self.in_channels > 0;
        if !positive {
            return err(format!("all extents and sizes must be positive: {self:?}"));
        }
        if self.depths.is_empty() || self.depths.iter().any(|&d| d == 0 || d % 2 != 0) {
            return err(format!("stage depths must be positive and even, got {:?}", self.depths));
        }
        if !self.embed_dim.is_multiple_of(self.head_dim) {
            return err(format!(
                "embed dim {} is not a multiple of head dim {}",
                self.embed_dim, self.head_dim
            ));
        }
        let scale = 1usize << (self.n_stages() - 1);
        for (axis, name) in [(0, "subcarrier"), (1, "time")] {
            let unit = self.patch[axis] * scale;
            if !self.input[axis].is_multiple_of(unit) {
                return err(format!(
                    "{name} extent {} is not divisible by patch {} × 2^{}",
                    self.input[axis],
                    self.patch[axis],
                    self.n_stages() - 1
                ));
            }
        }
        for (i, st) in self.stages().iter().enumerate() {
            for axis in 0..2 {
                if st.grid[axis] % st.window[axis] != 0 {
                    return err(format!(
                        "stage {i}: grid {:?} is not tiled by window {:?}",
                        st.grid, st.window
                    ));
                }
            }
        }
        Ok(())
    }

    /// Stage geometries, finest first.
    pub fn stages(&self) -> Vec<StageGeometry> {
        let base = self.patch_grid();
        (0..self.n_stages())
            .map(|i| {
                let grid = [base[0] >> i, base[1] >> i];
                let mut window = [0; 2];
                let mut shift = [0; 2];
                for a in 0..2 {
                    if grid[a] <= self.window[a] {
                        window[a] = grid[a];
                    } else {
                        window[a] = self.window[a];
                        shift[a] = self.window[a] / 2;
                    }
                }
                StageGeometry { grid, window, shift }
            })
            .collect()
    }

    /// Final patch grid, i.e. the feature-image extent.
    pub fn latent_grid(&self) -> [usize; 2] {
        self.stages().last().expect("validated config has stages").grid
    }

    pub fn raw_elements(&self) -> usize {
        self.in_channels * self.input[0] * self.input[1]
    }

    pub fn latent_elements(&self) -> usize {
        let g = self.latent_grid();
        g[0] * g[1] * self.embed_dim
    }

    /// 64-bit fingerprint of every field that affects parameter shapes or
    /// the forward pass.
    pub fn digest(&self) -> u64 {
        let canonical = format!(
            "swinfi-model-v1|patch={},{}|window={},{}|C={}|depths={:?}|head={}|mlp={}|classes={}|D={}|input={},{}",
            self.patch[0],
            self.patch[1],
            self.window[0],
            self.window[1],
            self.embed_dim,
            self.depths,
            self.head_dim,
            self.mlp_ratio,
            self.n_classes,
            self.in_channels,
            self.input[0],
            self.input[1]
        );
        let hash = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(hash[..8].try_into().unwrap())
    }
}

/// Compression ratio `γ = p_S·p_T·D·4^(stages−1) / C`, exactly.
pub fn compression_ratio(cfg: &ModelConfig) -> Ratio<u64> {
    let merges = cfg.n_stages().saturating_sub(1) as u32;
    let num = (cfg.patch[0] * cfg.patch[1] * cfg.in_channels) as u64 * 4u64.pow(merges);
    Ratio::new(num, cfg.embed_dim as u64)
}

/// Operation counts of global and windowed self-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    /// Patches per window (`M²` for square windows).
    pub m_eff: u64,
    pub omega_msa: u128,
    pub omega_wmsa: u128,
}

impl ComplexityReport {
    /// The shared `4hwC²` projection term.
    pub fn projection_term(&self) -> u128 {
        4 * (self.h * self.w) as u128 * (self.c as u128).pow(2)
    }
}

/// `Ω(MSA) = 4hwC² + 2(hw)²C` and `Ω(W-MSA) = 4hwC² + 2·M_eff·hw·C`.
pub fn complexity_estimate(h: u64, w: u64, c: u64, m_eff: u64) -> ComplexityReport {
    let hw = (h * w) as u128;
    let c2 = c as u128;
    let proj = 4 * hw * c2 * c2;
    ComplexityReport {
        h,
        w,
        c,
        m_eff,
        omega_msa: proj + 2 * hw * hw * c2,
        omega_wmsa: proj + 2 * m_eff as u128 * hw * c2,
    }
}

/// The ten rows of the compression-ratio grid with their listed γ.
pub fn table_one() -> Vec<(ModelConfig, u64)> {
    let rows: [(usize, &[usize], usize, u64); 10] = [
        (32, &[2, 2, 6, 2], 4, 64),
        (16, &[2, 2, 6, 2], 4, 128),
        (32, &[2, 2, 2, 6, 2], 4, 256),
        (16, &[2, 2, 2, 6, 2], 4, 512),
        (32, &[2, 2, 2, 2, 6, 2], 4, 1024),
        (64, &[2, 2, 6, 2], 8, 64),
        (32, &[2, 2, 6, 2], 8, 128),
        (64, &[2, 2, 2, 6, 2], 8, 256),
        (32, &[2, 2, 2, 6, 2], 8, 512),
        (64, &[2, 2, 2, 2, 6, 2], 8, 1024),
    ];
    rows.into_iter()
        .map(|(c, depths, d, gamma)| (ModelConfig::swinfi(c, depths, d), gamma))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_examples() {
        assert_eq!(
            compression_ratio(&ModelConfig::swinfi(32, &[2, 2, 6, 2], 4)),
            Ratio::from_integer(64)
        );
        assert_eq!(
            compression_ratio(&ModelConfig::swinfi(16, &[2, 2, 2, 6, 2], 4)),
            Ratio::from_integer(512)
        );
        assert_eq!(
            compression_ratio(&ModelConfig::swinfi(64, &[2, 2, 6, 2], 8)),
            Ratio::from_integer(64)
        );
    }

    #[test]
    fn gamma_matches_element_counts() {
        for (cfg, gamma) in table_one() {
            cfg.validate().unwrap();
            let measured = Ratio::new(cfg.raw_elements() as u64, cfg.latent_elements() as u64);
            assert_eq!(compression_ratio(&cfg), measured);
            assert_eq!(compression_ratio(&cfg), Ratio::from_integer(gamma));
        }
    }

    #[test]
    fn complexity_reference_values() {
        let r = complexity_estimate(32, 256, 32, 16);
        assert_eq!(r.omega_wmsa, 41_943_040);
        assert_eq!(r.omega_msa, 4_328_521_728);
        let full = complexity_estimate(4, 8, 16, 32);
        assert_eq!(full.omega_msa, full.omega_wmsa);
        let half = complexity_estimate(32, 256, 16, 16);
        assert_eq!(r.projection_term(), 4 * half.projection_term());
    }

    #[test]
    fn stage_geometry_clamps_small_grids() {
        let cfg = ModelConfig::swinfi(32, &[2, 2, 2, 2, 6, 2], 4);
        let st = cfg.stages();
        assert_eq!(st[0].grid, [32, 256]);
        assert_eq!(st[0].shift, [0, 8]);
        assert_eq!(st[5].grid, [1, 8]);
        assert_eq!(st[5].window, [1, 8]);
        assert_eq!(st[5].shift, [0, 0]);
        assert_eq!(st[0].windows(), 512);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ModelConfig::swinfi(32, &[2, 2, 6, 2], 4);
        cfg.patch = [3, 3];
        assert!(matches!(cfg.validate(), Err(ModelError::Config(_))));
        let mut cfg = ModelConfig::swinfi(24, &[2, 2], 4);
        assert!(cfg.validate().is_err());
        cfg.embed_dim = 32;
        cfg.depths = vec![2, 3];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn digest_tracks_fields() {
        let a = ModelConfig::swinfi(32, &[2, 2, 6, 2], 4);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.n_classes = 8;
        assert_ne!(a.digest(), b.digest());
    }
}
