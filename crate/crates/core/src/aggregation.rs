//! Hourglass 3-D cost aggregation with image guidance at every scale.
//!
//! | row | layer                                   | guidance |
//! |-----|-----------------------------------------|----------|
//! | 2   | conv3d 3³ → c1                           | I⁽⁴⁾     |
//! | 3   | conv3d 3³ s2 → c2, conv3d 3³ → c2        | I⁽⁸⁾     |
//! | 4   | conv3d 3³ s2 → c3, conv3d 3³ → c3        | I⁽¹⁶⁾    |
//! | 5   | conv3d 3³ s2 → c4, conv3d 3³ → c4        | I⁽³²⁾    |
//! | 6   | deconv3d 4³ s2 p1 → c3, conv3d 3³ → c3   | I⁽¹⁶⁾    |
//! | 7   | deconv3d 4³ s2 p1 → c2, conv3d 3³ → c2   | I⁽⁸⁾     |
//! | 8   | deconv3d 4³ s2 p1 → 1                    | –        |
//!
//! Rows 6 and 7 add the row 4 and row 3 outputs before their guidance.
//! Every conv is followed by leaky ReLU except row 8.

use rand::Rng;

use crate::config::{AggBaseline, GceMode, StereoConfig};
use crate::cost_volume::volume_dims;
use crate::error::{config_err, dim_err, Result};
use crate::features::FeaturePyramid;
use crate::gce::{additive_block, gce_block, init_guidance};
use crate::graph::{Graph, Var};
use crate::neighborhood::{init_neighborhood, neighborhood_block};
use crate::params::{BoundParams, ParamStore, LEAKY_SLOPE};

/// A guided site: table row, feature scale, index into the width arrays.
#[derive(Debug, Clone, Copy)]
pub struct Site {
    pub row: usize,
    pub scale: usize,
    pub level: usize,
}

pub const SITES: [Site; 6] = [
    Site { row: 2, scale: 4, level: 0 },
    Site { row: 3, scale: 8, level: 1 },
    Site { row: 4, scale: 16, level: 2 },
    Site { row: 5, scale: 32, level: 3 },
    Site { row: 6, scale: 16, level: 2 },
    Site { row: 7, scale: 8, level: 1 },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SiteKind {
    Excite,
    Additive,
    Neighborhood,
}

fn site_kind(cfg: &StereoConfig) -> Option<SiteKind> {
    match (cfg.gce_mode, cfg.agg_baseline) {
        (GceMode::Off, _) => None,
        (GceMode::Additive, _) => Some(SiteKind::Additive),
        (_, AggBaseline::Gce) => Some(SiteKind::Excite),
        (_, AggBaseline::Neighborhood) => Some(SiteKind::Neighborhood),
    }
}

/// Sites that receive guidance under the configured mode.
pub fn active_sites(cfg: &StereoConfig) -> &'static [Site] {
    match cfg.gce_mode {
        GceMode::Off => &[],
        GceMode::One => &SITES[..1],
        GceMode::Full | GceMode::Additive => &SITES,
    }
}

fn site_prefix(kind: SiteKind, row: usize) -> String {
    let tag = match kind {
        SiteKind::Excite => "gce",
        SiteKind::Additive => "add",
        SiteKind::Neighborhood => "neigh",
    };
    format!("agg.r{row}.{tag}")
}

fn init_conv3d<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) {
    store.init_weight(&format!("{name}.w"), &[cout, cin, 3, 3, 3], cin * 27, rng);
    store.init_zeros(&format!("{name}.b"), &[cout]);
}

fn init_deconv3d<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) {
    // Each output voxel of a 4³/s2 transposed conv sees 2³ taps per input channel.
    store.init_weight(&format!("{name}.w"), &[cin, cout, 4, 4, 4], cin * 8, rng);
    store.init_zeros(&format!("{name}.b"), &[cout]);
}

pub fn init_aggregator<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &StereoConfig, rng: &mut R) {
    let [c1, c2, c3, c4] = cfg.agg_widths;
    init_conv3d(store, "agg.r2.conv", 1, c1, rng);
    init_conv3d(store, "agg.r3.down", c1, c2, rng);
    init_conv3d(store, "agg.r3.conv", c2, c2, rng);
    init_conv3d(store, "agg.r4.down", c2, c3, rng);
    init_conv3d(store, "agg.r4.conv", c3, c3, rng);
    init_conv3d(store, "agg.r5.down", c3, c4, rng);
    init_conv3d(store, "agg.r5.conv", c4, c4, rng);
    init_deconv3d(store, "agg.r6.up", c4, c3, rng);
    init_conv3d(store, "agg.r6.conv", c3, c3, rng);
    init_deconv3d(store, "agg.r7.up", c3, c2, rng);
    init_conv3d(store, "agg.r7.conv", c2, c2, rng);
    init_deconv3d(store, "agg.r8.up", c2, 1, rng);

    let Some(kind) = site_kind(cfg) else { return };
    for site in active_sites(cfg) {
        let prefix = site_prefix(kind, site.row);
        let (ci, c) = (cfg.feature_widths[site.level], cfg.agg_widths[site.level]);
        match kind {
            SiteKind::Excite | SiteKind::Additive => init_guidance(store, &prefix, ci, c, rng),
            SiteKind::Neighborhood => init_neighborhood(store, &prefix, ci, c, rng),
        }
    }
}

fn conv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.conv3d(x, w, Some(b), stride, 1)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE))
}

fn deconv(g: &mut Graph, p: &BoundParams, name: &str, x: Var, target: &[usize]) -> Result<Var> {
    let w = p.var(&format!("{name}.w"))?;
    let b = p.var(&format!("{name}.b"))?;
    let y = g.deconv3d(x, w, Some(b), 2, 1)?;
    if g.shape(y)[1..] != target[1..] {
        return Err(dim_err!("{name} produced {:?}, skip target is {target:?}", g.shape(y)));
    }
    Ok(y)
}

struct Guide<'a> {
    cfg: &'a StereoConfig,
    kind: Option<SiteKind>,
    pyramid: &'a FeaturePyramid,
    params: &'a BoundParams,
}

impl Guide<'_> {
    fn apply(&self, g: &mut Graph, row: usize, x: Var) -> Result<Var> {
        let Some(kind) = self.kind else { return Ok(x) };
        let Some(site) = active_sites(self.cfg).iter().find(|s| s.row == row) else {
            return Ok(x);
        };
        let feat = self.pyramid.level(site.scale);
        let prefix = site_prefix(kind, row);
        match kind {
            SiteKind::Excite => gce_block(g, self.params, &prefix, x, feat),
            SiteKind::Additive => additive_block(g, self.params, &prefix, x, feat),
            SiteKind::Neighborhood => neighborhood_block(g, self.params, &prefix, x, feat),
        }
    }
}

/// Aggregates a `[1, Dq, h, w]` correlation volume into `[1, Dq, h, w]` logits.
pub fn aggregate(
    g: &mut Graph,
    cost0: Var,
    pyramid: &FeaturePyramid,
    params: &BoundParams,
    cfg: &StereoConfig,
) -> Result<Var> {
    let [c, dq, h, w] = volume_dims(g, cost0)?;
    if c != 1 {
        return Err(dim_err!("aggregator expects a single-channel volume, got {c} channels"));
    }
    if dq % 8 != 0 {
        return Err(config_err!("{dq} disparities not divisible by 8"));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(dim_err!("volume extents {h}×{w} not divisible by 8"));
    }
    let guide = Guide { cfg, kind: site_kind(cfg), pyramid, params };

    let x = conv(g, params, "agg.r2.conv", cost0, 1)?;
    let x2 = guide.apply(g, 2, x)?;
    let x = conv(g, params, "agg.r3.down", x2, 2)?;
    let x = conv(g, params, "agg.r3.conv", x, 1)?;
    let x3 = guide.apply(g, 3, x)?;
    let x = conv(g, params, "agg.r4.down", x3, 2)?;
    let x = conv(g, params, "agg.r4.conv", x, 1)?;
    let x4 = guide.apply(g, 4, x)?;
    let x = conv(g, params, "agg.r5.down", x4, 2)?;
    let x = conv(g, params, "agg.r5.conv", x, 1)?;
    let x5 = guide.apply(g, 5, x)?;

    let s4 = g.shape(x4).to_vec();
    let x = deconv(g, params, "agg.r6.up", x5, &s4)?;
    let x = g.leaky_relu(x, LEAKY_SLOPE);
    let x = conv(g, params, "agg.r6.conv", x, 1)?;
    let x = g.add(x, x4)?;
    let x6 = guide.apply(g, 6, x)?;

    let s3 = g.shape(x3).to_vec();
    let x = deconv(g, params, "agg.r7.up", x6, &s3)?;
    let x = g.leaky_relu(x, LEAKY_SLOPE);
    let x = conv(g, params, "agg.r7.conv", x, 1)?;
    let x = g.add(x, x3)?;
    let x7 = guide.apply(g, 7, x)?;

    let shape0 = g.shape(cost0).to_vec();
    deconv(g, params, "agg.r8.up", x7, &shape0)
}
