//! Analytic cost accounting.
//!
//! Two quantities are reported per layer. `formula_units` is the closed-form
//! block cost used to compare attention designs:
//!
//! * DCA: `(2E+4)(N+M)D² + 2NMD`
//! * SA:  `(2E+4)ND² + 2N²D`
//! * CA:  `2MD² + 2ND² + 2NMD + 2E(N+M)D²` (same accounting pattern, extended to
//!   the meta-initialising block)
//!
//! `macs` counts the multiply-accumulates the implementation actually runs:
//! projections, attention products, FFN, CPE, convolutions and linear layers,
//! with normalisation, activations and softmax excluded. Under the default
//! [`Convention::Table`] a DCA block's two attention products are charged
//! `2NMD` together, as in the closed form; [`Convention::Strict`] charges the
//! `4NMD` the two branches really execute. SA blocks run attention on both
//! streams and CA blocks apply the FFN to meta tokens only; both conventions
//! charge that.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{Block, BlockKind, Downsample, ImageStem, MetaStem, CPE_KERNEL};
use crate::error::{Error, Result};
use crate::layers::{Linear, Norm};
use crate::model::VariantSpec;

/// Closed-form block cost. Arguments are token counts, width and FFN expansion.
pub fn count_block(kind: BlockKind, n: u64, m: u64, d: u64, e: u64) -> u64 {
    match kind {
        BlockKind::Dca => (2 * e + 4) * (n + m) * d * d + 2 * n * m * d,
        BlockKind::Sa => (2 * e + 4) * n * d * d + 2 * n * n * d,
        BlockKind::Ca => 2 * m * d * d + 2 * n * d * d + 2 * n * m * d + 2 * e * (n + m) * d * d,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// DCA attention charged `2NMD`, matching the closed form.
    #[default]
    Table,
    /// DCA attention charged `4NMD`, one `2NMD` per branch.
    Strict,
}

impl Convention {
    pub fn note(self) -> &'static str {
        match self {
            Convention::Table => {
                "MACs: matmul and conv multiply-accumulates; norms, activations and softmax excluded; \
                 DCA attention charged 2NMD as in the closed form"
            }
            Convention::Strict => {
                "MACs: matmul and conv multiply-accumulates; norms, activations and softmax excluded; \
                 DCA attention charged 4NMD (both branches)"
            }
        }
    }
}

impl FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Convention::Table),
            "strict" => Ok(Convention::Strict),
            other => Err(Error::Usage(format!("unknown convention {other:?}; use table or strict"))),
        }
    }
}

/// Projection, attention-product and FFN MACs of one block (CPE excluded).
pub fn block_matmul_macs(kind: BlockKind, n: u64, m: u64, d: u64, e: u64, convention: Convention) -> u64 {
    match kind {
        BlockKind::Dca => {
            let attn = match convention {
                Convention::Table => 2 * n * m * d,
                Convention::Strict => 4 * n * m * d,
            };
            (2 * e + 4) * (n + m) * d * d + attn
        }
        BlockKind::Sa => count_block(BlockKind::Sa, n, 0, d, e) + count_block(BlockKind::Sa, m, 0, d, e),
        BlockKind::Ca => 2 * m * d * d + 2 * n * d * d + 2 * n * m * d + 2 * e * m * d * d,
    }
}

/// Depthwise positional-encoding convolution MACs.
pub fn cpe_macs(n: u64, d: u64) -> u64 {
    (CPE_KERNEL * CPE_KERNEL) as u64 * n * d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    MetaTokens,
    Stem,
    MetaStem,
    Ca,
    Dca,
    Sa,
    Downsample,
    Head,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::MetaTokens => "meta_tokens",
            EntryKind::Stem => "stem",
            EntryKind::MetaStem => "meta_stem",
            EntryKind::Ca => "ca",
            EntryKind::Dca => "dca",
            EntryKind::Sa => "sa",
            EntryKind::Downsample => "downsample",
            EntryKind::Head => "head",
        }
    }
}

/// One row of a report. `n`, `m` and `d` are the image-token count, meta-token
/// count and output width at that layer; `e` is zero outside blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub n: u64,
    pub m: u64,
    pub d: u64,
    pub e: u64,
    pub formula_units: u64,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub formula_units: u64,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub variant: String,
    pub input_h: usize,
    pub input_w: usize,
    pub meta_len: usize,
    pub convention: Convention,
    pub note: String,
    pub entries: Vec<Entry>,
    pub totals: Totals,
}

impl ComplexityReport {
    fn push(&mut self, e: Entry) {
        self.totals.formula_units += e.formula_units;
        self.totals.macs += e.macs;
        self.totals.params += e.params;
        self.entries.push(e);
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Entry> {
        self.entries
            .iter()
            .filter(|e| matches!(e.kind, EntryKind::Ca | EntryKind::Dca | EntryKind::Sa))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn conv_macs(cin: usize, cout: usize, k: usize, out_pixels: usize) -> u64 {
    (k * k * cin * cout * out_pixels) as u64
}

/// Walks the layer layout built by [`crate::model::Model::new`] and accounts
/// every layer. Parameter totals equal the built model's exactly.
pub fn count_model(spec: &VariantSpec, input_hw: (usize, usize), convention: Convention) -> Result<ComplexityReport> {
    spec.validate()?;
    let (h, w) = input_hw;
    let grids = spec.stage_grids(h, w)?;
    let m = spec.meta_len;
    let e = spec.expansion;
    let d = spec.dims;
    let mut r = ComplexityReport {
        variant: spec.name.clone(),
        input_h: h,
        input_w: w,
        meta_len: m,
        convention,
        note: convention.note().to_string(),
        entries: Vec::new(),
        totals: Totals::default(),
    };
    let row = |name: String, kind: EntryKind, n: usize, dim: usize, macs: u64, params: usize| Entry {
        name,
        kind,
        n: n as u64,
        m: m as u64,
        d: dim as u64,
        e: 0,
        formula_units: 0,
        macs,
        params: params as u64,
    };

    let d0 = spec.initial_meta_dim();
    r.push(row("meta_tokens".into(), EntryKind::MetaTokens, 0, d0, 0, m * d0));

    let mid = ImageStem::hidden_channels(d[0]);
    let n1 = grids[0].0 * grids[0].1;
    let stem_macs = conv_macs(spec.in_channels, mid, 3, (h / 2) * (w / 2)) + conv_macs(mid, d[0], 3, n1);
    r.push(row("stem".into(), EntryKind::Stem, n1, d[0], stem_macs, ImageStem::num_params(spec.in_channels, d[0])));

    if spec.toggles.use_meta_stem {
        let macs = (m * (spec.meta_dim0 * d[0] + d[0] * d[0])) as u64;
        r.push(row("meta_stem".into(), EntryKind::MetaStem, 0, d[0], macs, MetaStem::num_params(spec.meta_dim0, d[0])));
    }

    let layout: [Vec<(BlockKind, usize)>; 4] = [
        vec![(BlockKind::Ca, spec.ca_blocks()), (BlockKind::Dca, spec.blocks[1])],
        vec![(BlockKind::Dca, spec.blocks[2])],
        vec![(BlockKind::Sa, spec.blocks[3])],
        vec![(BlockKind::Sa, spec.blocks[4])],
    ];
    for (k, kinds) in layout.iter().enumerate() {
        let n = grids[k].0 * grids[k].1;
        if k > 0 {
            let macs = conv_macs(d[k - 1], d[k], 3, n) + (m * d[k - 1] * d[k]) as u64;
            r.push(row(
                format!("stages.{k}.down"),
                EntryKind::Downsample,
                n,
                d[k],
                macs,
                Downsample::num_params(d[k - 1], d[k]),
            ));
        }
        let mut i = 0;
        for &(kind, count) in kinds {
            for _ in 0..count {
                let (nu, mu, du, eu) = (n as u64, m as u64, d[k] as u64, e as u64);
                let cpe = if kind == BlockKind::Ca { 0 } else { cpe_macs(nu, du) };
                let entry_kind = match kind {
                    BlockKind::Ca => EntryKind::Ca,
                    BlockKind::Dca => EntryKind::Dca,
                    BlockKind::Sa => EntryKind::Sa,
                };
                r.push(Entry {
                    name: format!("stages.{k}.blocks.{i}"),
                    kind: entry_kind,
                    n: nu,
                    m: mu,
                    d: du,
                    e: eu,
                    formula_units: count_block(kind, nu, mu, du, eu),
                    macs: block_matmul_macs(kind, nu, mu, du, eu, convention) + cpe,
                    params: Block::num_params(kind, d[k], e, true) as u64,
                });
                i += 1;
            }
        }
    }

    let norms = if spec.toggles.use_meta_pooling { 2 } else { 1 };
    r.push(row(
        "head".into(),
        EntryKind::Head,
        grids[3].0 * grids[3].1,
        spec.num_classes,
        (d[3] * spec.num_classes) as u64,
        norms * Norm::num_params(d[3]) + Linear::num_params(d[3], spec.num_classes),
    ));
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Usage(format!("unknown report format {other:?}; use table, csv or json"))),
        }
    }
}

pub const CSV_HEADER: [&str; 9] = ["name", "kind", "n", "m", "d", "e", "formula_units", "macs", "params"];

/// Renders a report. CSV has one row per entry plus a final `total` row; JSON
/// is the serialised [`ComplexityReport`].
pub fn emit_report(report: &ComplexityReport, format: &str) -> Result<String> {
    match format.parse::<ReportFormat>()? {
        ReportFormat::Json => serde_json::to_string_pretty(report).map_err(|e| Error::Input(e.to_string())),
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(CSV_HEADER).map_err(crate::io::csv_err)?;
            for e in &report.entries {
                w.serialize(e).map_err(crate::io::csv_err)?;
            }
            let t = report.totals;
            w.write_record([
                "total".to_string(),
                "total".to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                t.formula_units.to_string(),
                t.macs.to_string(),
                t.params.to_string(),
            ])
            .map_err(crate::io::csv_err)?;
            let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        ReportFormat::Table => Ok(render_table(report)),
    }
}

fn giga(v: u64) -> f64 {
    v as f64 / 1e9
}

fn render_table(r: &ComplexityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} @ {}x{}, M={}, convention={:?}",
        r.variant, r.input_h, r.input_w, r.meta_len, r.convention
    );
    let _ = writeln!(
        s,
        "{:<20} {:<11} {:>6} {:>4} {:>4} {:>2} {:>15} {:>8} {:>15} {:>8} {:>10}",
        "name", "kind", "N", "M", "D", "E", "formula_units", "G", "macs", "G", "params"
    );
    for e in &r.entries {
        let _ = writeln!(
            s,
            "{:<20} {:<11} {:>6} {:>4} {:>4} {:>2} {:>15} {:>8.4} {:>15} {:>8.4} {:>10}",
            e.name,
            e.kind.as_str(),
            e.n,
            e.m,
            e.d,
            e.e,
            e.formula_units,
            giga(e.formula_units),
            e.macs,
            giga(e.macs),
            e.params
        );
    }
    let t = r.totals;
    let _ = writeln!(
        s,
        "{:<20} {:<11} {:>6} {:>4} {:>4} {:>2} {:>15} {:>8.4} {:>15} {:>8.4} {:>10}",
        "total", "", "", "", "", "", t.formula_units, giga(t.formula_units), t.macs, giga(t.macs), t.params
    );
    let _ = writeln!(s, "params: {:.2} M; MACs: {:.3} G", t.params as f64 / 1e6, giga(t.macs));
    let _ = writeln!(s, "note: {}", r.note);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(count_block(BlockKind::Dca, 3136, 16, 64, 4), 161_349_632);
        assert_eq!(count_block(BlockKind::Dca, 3136, 16, 96, 4), 358_219_776);
        assert_eq!(count_block(BlockKind::Sa, 3136, 0, 64, 4), 1_412_956_160);
        assert_eq!(count_block(BlockKind::Sa, 3136, 0, 96, 4), 2_235_039_744);
        assert_eq!(count_block(BlockKind::Dca, 100, 0, 8, 4), 12 * 100 * 64);
    }

    #[test]
    fn strict_adds_one_attention_product() {
        let t = block_matmul_macs(BlockKind::Dca, 3136, 16, 64, 4, Convention::Table);
        let s = block_matmul_macs(BlockKind::Dca, 3136, 16, 64, 4, Convention::Strict);
        assert_eq!(s - t, 2 * 3136 * 16 * 64);
    }

    #[test]
    fn totals_are_entry_sums() {
        let r = count_model(&VariantSpec::small(), (224, 224), Convention::Table).unwrap();
        let sum: u64 = r.entries.iter().map(|e| e.macs).sum();
        assert_eq!(sum, r.totals.macs);
        assert_eq!(r.blocks().count(), 13);
    }

    #[test]
    fn unknown_format_is_usage_error() {
        let r = count_model(&VariantSpec::tiny(), (224, 224), Convention::Table).unwrap();
        assert!(matches!(emit_report(&r, "xml"), Err(Error::Usage(_))));
        assert!(matches!(count_model(&VariantSpec::tiny(), (200, 224), Convention::Table), Err(Error::Input(_))));
    }
}
