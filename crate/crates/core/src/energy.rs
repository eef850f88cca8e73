//! Theoretical energy accounting.
//!
//! Every linear operator in the network reports its multiply-accumulate op
//! count and the firing statistics of the tensor driving it, per timestep.
//! Energy is then priced per op: dense rows (the image-fed stem) cost one
//! MAC each, spike-fed rows cost accumulates gated by the firing rate, and
//! scale/softmax rows exist in the report with zero cost because the
//! architecture has no softmax and folds the scale into thresholds.
//!
//! Firing rate enters the accumulate formula under two published-table
//! conventions, and the report carries both:
//! interpretation A prices `ops * E_AC * nonzero_fraction * d_cap * T`
//! (every potential spike event costs one accumulate), interpretation B
//! prices `ops * E_AC * mean_integer * T` (each integer count is that many
//! unit events). B is the headline figure; A is an upper bound since
//! `mean_integer <= nonzero_fraction * d_cap`.

use crate::error::{Error, Result};
use crate::tensor::FiringStats;
use serde::{Deserialize, Serialize};

/// Energy per multiply-accumulate, picojoules (45 nm process figure).
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate, picojoules (45 nm process figure).
pub const E_AC_PJ: f64 = 0.9;

/// Which sub-network a layer ran in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Template,
    Search,
}

/// Energy class of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerClass {
    /// Dense-input convolution (the image-fed stem); MAC-priced.
    FirstConvMac,
    /// Spike-fed convolution; accumulate-priced.
    ConvAc,
    /// Spike-fed linear map; accumulate-priced.
    LinearAc,
    /// Query/key/value projections; accumulate-priced.
    AttentionQkv,
    /// Attention matrix products; accumulate-priced.
    AttentionProduct,
    /// Present to document that no softmax exists; zero energy.
    SoftmaxAbsent,
    /// Present to document that scaling folds into thresholds; zero energy.
    ScaleAbsent,
}

impl LayerClass {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "first_conv_mac" => LayerClass::FirstConvMac,
            "conv_ac" => LayerClass::ConvAc,
            "linear_ac" => LayerClass::LinearAc,
            "attention_qkv" => LayerClass::AttentionQkv,
            "attention_product" => LayerClass::AttentionProduct,
            "softmax_absent" => LayerClass::SoftmaxAbsent,
            "scale_absent" => LayerClass::ScaleAbsent,
            other => return Err(Error::Parse(format!("unknown layer class '{other}'"))),
        })
    }

    pub fn token(&self) -> &'static str {
        match self {
            LayerClass::FirstConvMac => "first_conv_mac",
            LayerClass::ConvAc => "conv_ac",
            LayerClass::LinearAc => "linear_ac",
            LayerClass::AttentionQkv => "attention_qkv",
            LayerClass::AttentionProduct => "attention_product",
            LayerClass::SoftmaxAbsent => "softmax_absent",
            LayerClass::ScaleAbsent => "scale_absent",
        }
    }

    fn is_zero_cost(&self) -> bool {
        matches!(self, LayerClass::SoftmaxAbsent | LayerClass::ScaleAbsent)
    }

    pub fn is_mac(&self) -> bool {
        matches!(self, LayerClass::FirstConvMac)
    }
}

/// One layer execution at one timestep.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub name: String,
    pub branch: Branch,
    pub class: LayerClass,
    pub timestep: usize,
    /// Multiply-accumulate count of the op (counted once, no 2x convention).
    pub mac_ops: u64,
    /// Firing statistics of the tensor driving the op.
    pub stats: FiringStats,
    pub d_cap: u32,
}

/// Forward-pass instrumentation sink. Op counters always accumulate;
/// per-layer records are kept only when tracing is enabled.
#[derive(Debug, Clone)]
pub struct Probe {
    pub tracing: bool,
    pub branch: Branch,
    pub records: Vec<LayerRecord>,
    /// Total MAC ops seen, regardless of tracing.
    pub total_mac_ops: u64,
    /// Ops spent in attention matrix products only.
    pub attn_product_ops: u64,
}

impl Probe {
    pub fn off() -> Self {
        Probe {
            tracing: false,
            branch: Branch::Search,
            records: Vec::new(),
            total_mac_ops: 0,
            attn_product_ops: 0,
        }
    }

    pub fn tracing(branch: Branch) -> Self {
        Probe { tracing: true, branch, ..Probe::off() }
    }

    pub fn record(
        &mut self,
        name: &str,
        class: LayerClass,
        timestep: usize,
        mac_ops: u64,
        stats: FiringStats,
        d_cap: u32,
    ) {
        self.total_mac_ops += mac_ops;
        if self.tracing {
            self.records.push(LayerRecord {
                name: name.to_string(),
                branch: self.branch,
                class,
                timestep,
                mac_ops,
                stats,
                d_cap,
            });
        }
    }
}

/// Energy constants in play.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EnergyModel {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { e_mac_pj: E_MAC_PJ, e_ac_pj: E_AC_PJ }
    }
}

/// Firing-rate reading used to price accumulate rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SfrInterp {
    /// R = nonzero fraction, with the extra x d_cap factor.
    NonzeroFractionTimesD,
    /// R = mean integer count, no extra factor (headline).
    MeanInteger,
}

impl EnergyModel {
    /// Dense-network reference: every op is a MAC.
    pub fn ann_energy_pj(&self, mac_ops: u64) -> f64 {
        mac_ops as f64 * self.e_mac_pj
    }

    /// Energy of one layer record (one timestep) under an interpretation.
    pub fn record_energy_pj(&self, r: &LayerRecord, interp: SfrInterp) -> f64 {
        if r.class.is_zero_cost() {
            return 0.0;
        }
        let ops = r.mac_ops as f64;
        if r.class.is_mac() {
            // MAC rows: the rate gates how many outputs see input, no cap factor.
            return ops * self.e_mac_pj * r.stats.nonzero_fraction;
        }
        match interp {
            SfrInterp::NonzeroFractionTimesD => {
                ops * self.e_ac_pj * r.stats.nonzero_fraction * r.d_cap as f64
            }
            SfrInterp::MeanInteger => ops * self.e_ac_pj * r.stats.mean_integer,
        }
    }
}

/// One aggregated row of an energy report (a layer across its timesteps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyRow {
    pub name: String,
    pub branch: Branch,
    pub class: String,
    /// Op count per timestep application.
    pub mac_ops: u64,
    pub timesteps: usize,
    /// Per-timestep nonzero fractions of the driving tensor.
    pub nonzero_fraction: Vec<f64>,
    /// Per-timestep mean integer counts of the driving tensor.
    pub mean_integer: Vec<f64>,
    pub energy_a_pj: f64,
    pub energy_b_pj: f64,
}

/// Full energy report: per-layer rows, branch subtotals, amortized totals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    pub model: EnergyModel,
    pub rows: Vec<EnergyRow>,
    pub template_a_pj: f64,
    pub template_b_pj: f64,
    pub search_a_pj: f64,
    pub search_b_pj: f64,
    pub total_a_pj: f64,
    pub total_b_pj: f64,
    /// Template refresh interval used for amortization.
    pub update_interval: u32,
    /// Per-frame energy with the template pass spread over the interval.
    pub per_frame_a_pj: f64,
    pub per_frame_b_pj: f64,
    /// Dense-network reference at the same op counts.
    pub ann_reference_pj: f64,
}

/// Spread a template pass over the frames between refreshes.
pub fn amortize_template(template_pj: f64, update_interval: u32) -> f64 {
    template_pj / update_interval.max(1) as f64
}

/// Aggregate probe records into a report.
pub fn build_report(
    model: &EnergyModel,
    records: &[LayerRecord],
    update_interval: u32,
) -> EnergyReport {
    // Group by (branch, name), keeping first-seen order.
    let mut order: Vec<(Branch, String)> = Vec::new();
    for r in records {
        let key = (r.branch, r.name.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    let mut rows = Vec::new();
    for (branch, name) in order {
        let group: Vec<&LayerRecord> = records
            .iter()
            .filter(|r| r.branch == branch && r.name == name)
            .collect();
        let mut by_t = group.clone();
        by_t.sort_by_key(|r| r.timestep);
        let energy_a: f64 = group
            .iter()
            .map(|r| model.record_energy_pj(r, SfrInterp::NonzeroFractionTimesD))
            .sum();
        let energy_b: f64 = group
            .iter()
            .map(|r| model.record_energy_pj(r, SfrInterp::MeanInteger))
            .sum();
        rows.push(EnergyRow {
            name,
            branch,
            class: group[0].class.token().to_string(),
            mac_ops: group[0].mac_ops,
            timesteps: group.len(),
            nonzero_fraction: by_t.iter().map(|r| r.stats.nonzero_fraction).collect(),
            mean_integer: by_t.iter().map(|r| r.stats.mean_integer).collect(),
            energy_a_pj: energy_a,
            energy_b_pj: energy_b,
        });
    }
    finish_report(model, rows, update_interval, ann_reference(records))
}

fn ann_reference(records: &[LayerRecord]) -> f64 {
    let ops: u64 = records
        .iter()
        .filter(|r| !r.class.is_zero_cost())
        .map(|r| r.mac_ops)
        .sum();
    EnergyModel::default().ann_energy_pj(ops)
}

fn finish_report(
    model: &EnergyModel,
    rows: Vec<EnergyRow>,
    update_interval: u32,
    ann_reference_pj: f64,
) -> EnergyReport {
    let sum = |branch: Branch, pick_a: bool| -> f64 {
        rows.iter()
            .filter(|r| r.branch == branch)
            .map(|r| if pick_a { r.energy_a_pj } else { r.energy_b_pj })
            .sum()
    };
    let template_a = sum(Branch::Template, true);
    let template_b = sum(Branch::Template, false);
    let search_a = sum(Branch::Search, true);
    let search_b = sum(Branch::Search, false);
    EnergyReport {
        model: *model,
        total_a_pj: template_a + search_a,
        total_b_pj: template_b + search_b,
        per_frame_a_pj: search_a + amortize_template(template_a, update_interval),
        per_frame_b_pj: search_b + amortize_template(template_b, update_interval),
        template_a_pj: template_a,
        template_b_pj: template_b,
        search_a_pj: search_a,
        search_b_pj: search_b,
        update_interval,
        ann_reference_pj,
        rows,
    }
}

impl EnergyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table. Op counts are MACs counted once (not doubled into
    /// FLOPs); energies in picojoules.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "energy model: E_MAC = {} pJ, E_AC = {} pJ (per op, ops counted once)\n",
            self.model.e_mac_pj, self.model.e_ac_pj
        ));
        s.push_str(
            "rate readings: A = nonzero fraction x cap, B = mean integer count (headline)\n",
        );
        s.push_str(&format!(
            "{:<42} {:>8} {:>12} {:>4} {:>14} {:>14}\n",
            "layer", "branch", "ops", "T", "E_a (pJ)", "E_b (pJ)"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<42} {:>8} {:>12} {:>4} {:>14.3} {:>14.3}\n",
                r.name,
                match r.branch {
                    Branch::Template => "template",
                    Branch::Search => "search",
                },
                r.mac_ops,
                r.timesteps,
                r.energy_a_pj,
                r.energy_b_pj
            ));
        }
        s.push_str(&format!(
            "template subtotal: A={:.3} pJ, B={:.3} pJ\n",
            self.template_a_pj, self.template_b_pj
        ));
        s.push_str(&format!(
            "search subtotal:   A={:.3} pJ, B={:.3} pJ\n",
            self.search_a_pj, self.search_b_pj
        ));
        s.push_str(&format!(
            "totals:            A={:.3} pJ, B={:.3} pJ (headline: B)\n",
            self.total_a_pj, self.total_b_pj
        ));
        s.push_str(&format!(
            "per frame at template interval {}: A={:.3} pJ, B={:.3} pJ\n",
            self.update_interval, self.per_frame_a_pj, self.per_frame_b_pj
        ));
        s.push_str(&format!(
            "dense reference at same ops: {:.3} pJ\n",
            self.ann_reference_pj
        ));
        s
    }
}

/// A row imported from a published firing-rate table. The rate values are
/// equivalent integer counts (they may exceed 1), so both report columns use
/// them directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedRow {
    pub name: String,
    pub class: LayerClass,
    pub mac_ops: f64,
    pub rates: Vec<f64>,
}

/// Parse a delimited firing-rate table.
///
/// Format: one header line `name class ops r1 r2 ... rT`, then one line per
/// layer; fields separated by tabs, commas, or runs of spaces. Lines starting
/// with `#` are comments. The `ops` column may be `-` for "not published"
/// (treated as 1.0 so energies are per-op).
pub fn parse_sfr_table(text: &str) -> Result<Vec<ImportedRow>> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == '\t' || c == ',')
            .flat_map(|f| f.split_whitespace())
            .collect();
        if !saw_header {
            if fields.first() != Some(&"name") {
                return Err(Error::Parse(format!(
                    "line {}: expected header starting with 'name'",
                    lineno + 1
                )));
            }
            saw_header = true;
            continue;
        }
        if fields.len() < 4 {
            return Err(Error::Parse(format!(
                "line {}: need name, class, ops and at least one rate",
                lineno + 1
            )));
        }
        let class = LayerClass::parse(fields[1])?;
        let mac_ops = if fields[2] == "-" {
            1.0
        } else {
            fields[2]
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: bad ops: {e}", lineno + 1)))?
        };
        let rates = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: bad rate: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(ImportedRow {
            name: fields[0].to_string(),
            class,
            mac_ops,
            rates,
        });
    }
    if !saw_header {
        return Err(Error::Parse("empty table".into()));
    }
    Ok(rows)
}

/// Energy of an imported row: `ops * E * sum(rates)`, so a row with unit
/// rates over T timesteps prices exactly `T * E * ops`.
pub fn imported_row_energy_pj(model: &EnergyModel, row: &ImportedRow) -> f64 {
    if row.class.is_zero_cost() {
        return 0.0;
    }
    let e = if row.class.is_mac() { model.e_mac_pj } else { model.e_ac_pj };
    row.mac_ops * e * row.rates.iter().sum::<f64>()
}

/// Build a report directly from an imported table (template branch rows),
/// without running the network.
pub fn report_from_table(
    model: &EnergyModel,
    rows: &[ImportedRow],
    update_interval: u32,
) -> EnergyReport {
    let out: Vec<EnergyRow> = rows
        .iter()
        .map(|r| {
            let e = imported_row_energy_pj(model, r);
            EnergyRow {
                name: r.name.clone(),
                branch: Branch::Template,
                class: r.class.token().to_string(),
                mac_ops: r.mac_ops as u64,
                timesteps: r.rates.len(),
                nonzero_fraction: r.rates.clone(),
                mean_integer: r.rates.clone(),
                energy_a_pj: e,
                energy_b_pj: e,
            }
        })
        .collect();
    let ann = EnergyModel::default()
        .ann_energy_pj(rows.iter().map(|r| r.mac_ops as u64 * r.rates.len() as u64).sum());
    finish_report(model, out, update_interval, ann)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(nonzero: f64, mean: f64) -> FiringStats {
        FiringStats {
            nonzero_fraction: nonzero,
            mean_integer: mean,
            element_count: 100,
            timestep_count: 1,
        }
    }

    fn rec(class: LayerClass, ops: u64, st: FiringStats) -> LayerRecord {
        LayerRecord {
            name: "l".into(),
            branch: Branch::Search,
            class,
            timestep: 0,
            mac_ops: ops,
            stats: st,
            d_cap: 4,
        }
    }

    #[test]
    fn constants_are_the_published_picojoules() {
        let m = EnergyModel::default();
        assert_eq!(m.e_mac_pj, 4.6);
        assert_eq!(m.e_ac_pj, 0.9);
        assert_eq!(m.ann_energy_pj(1), 4.6);
    }

    #[test]
    fn spike_row_at_unit_rate_single_step() {
        // 1 op, R = 1, T = 1: exactly one accumulate.
        let m = EnergyModel::default();
        let r = rec(LayerClass::ConvAc, 1, stats(1.0, 1.0));
        assert_eq!(m.record_energy_pj(&r, SfrInterp::MeanInteger), 0.9);
        // interpretation A adds the d_cap factor on the fraction reading
        assert_eq!(
            m.record_energy_pj(&r, SfrInterp::NonzeroFractionTimesD),
            0.9 * 4.0
        );
    }

    #[test]
    fn thousand_ops_conv_row() {
        let m = EnergyModel::default();
        let r = rec(LayerClass::ConvAc, 1000, stats(1.0, 1.0));
        assert_eq!(m.record_energy_pj(&r, SfrInterp::MeanInteger), 900.0);
    }

    #[test]
    fn ann_reference_scales_linearly() {
        let m = EnergyModel::default();
        assert_eq!(m.ann_energy_pj(1_000_000_000), 4.6e9);
    }

    #[test]
    fn zero_cost_rows_price_zero() {
        let m = EnergyModel::default();
        for class in [LayerClass::SoftmaxAbsent, LayerClass::ScaleAbsent] {
            let r = rec(class, 123456, stats(1.0, 4.0));
            assert_eq!(m.record_energy_pj(&r, SfrInterp::MeanInteger), 0.0);
            assert_eq!(m.record_energy_pj(&r, SfrInterp::NonzeroFractionTimesD), 0.0);
        }
    }

    #[test]
    fn interpretation_a_bounds_b() {
        // mean_integer <= nonzero_fraction * d_cap elementwise, so A >= B.
        let m = EnergyModel::default();
        let r = rec(LayerClass::LinearAc, 500, stats(0.5, 1.3));
        let a = m.record_energy_pj(&r, SfrInterp::NonzeroFractionTimesD);
        let b = m.record_energy_pj(&r, SfrInterp::MeanInteger);
        assert!(a >= b);
        assert!((a - 500.0 * 0.9 * 0.5 * 4.0).abs() < 1e-9);
        assert!((b - 500.0 * 0.9 * 1.3).abs() < 1e-9);
    }

    #[test]
    fn report_totals_are_row_sums() {
        let m = EnergyModel::default();
        let mut records = Vec::new();
        for t in 0..3 {
            records.push(LayerRecord {
                name: "stage1.downsample.conv".into(),
                branch: Branch::Template,
                class: LayerClass::FirstConvMac,
                timestep: t,
                mac_ops: 1000,
                stats: stats(1.0, 1.0),
                d_cap: 4,
            });
        }
        records.push(LayerRecord {
            name: "head.score.conv0".into(),
            branch: Branch::Search,
            class: LayerClass::ConvAc,
            timestep: 0,
            mac_ops: 2000,
            stats: stats(0.25, 0.5),
            d_cap: 4,
        });
        let rep = build_report(&m, &records, 25);
        let sum_b: f64 = rep.rows.iter().map(|r| r.energy_b_pj).sum();
        assert!((rep.total_b_pj - sum_b).abs() <= 1e-6 * sum_b.abs());
        // Stem row: three timesteps at R=1 price exactly 3 * E_MAC * ops.
        let stem = &rep.rows[0];
        assert_eq!(stem.timesteps, 3);
        assert!((stem.energy_b_pj - 3.0 * 4.6 * 1000.0).abs() < 1e-9);
        // Amortization: per-frame = search + template/interval, exactly.
        let want = rep.search_b_pj + rep.template_b_pj / 25.0;
        assert_eq!(rep.per_frame_b_pj, want);
    }

    #[test]
    fn table_roundtrip_and_stem_row() {
        let text = "\
# published firing rates, template branch
name\tclass\tops\tt1\tt2\tt3
stage1.downsample.conv\tfirst_conv_mac\t1000\t1\t1\t1
stage1.block0.ssconv.pw1\tconv_ac\t500\t1.458\t1.4853\t1.5083
attn.scale\tscale_absent\t-\t0\t0\t0
";
        let rows = parse_sfr_table(text).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].rates, vec![1.0, 1.0, 1.0]);
        let m = EnergyModel::default();
        // Unit rates over three steps: bit-exactly ops * E_MAC * 3.
        assert_eq!(imported_row_energy_pj(&m, &rows[0]), 1000.0 * 4.6 * 3.0);
        assert_eq!(imported_row_energy_pj(&m, &rows[2]), 0.0);
        let rep = report_from_table(&m, &rows, 40);
        assert_eq!(rep.rows.len(), 3);
        assert!((rep.template_b_pj
            - (3.0 * 4.6 * 1000.0 + 0.9 * 500.0 * (1.458 + 1.4853 + 1.5083)))
        .abs()
            < 1e-9);
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(parse_sfr_table("").is_err());
        assert!(parse_sfr_table("nope\nrow conv_ac 1 1").is_err());
        assert!(parse_sfr_table("name class ops t1\nrow bad_class 1 1").is_err());
    }

    #[test]
    fn shipped_firing_rate_table_prices_consistently() {
        let text = include_str!("../assets/sfr_b256_t3_template.tsv");
        let rows = parse_sfr_table(text).unwrap();
        assert_eq!(rows.len(), 125);
        let m = EnergyModel::default();

        // Stem anchor: unit rates over three steps price exactly 3 * E_MAC
        // per op, bit-for-bit.
        let stem = &rows[0];
        assert_eq!(stem.name, "stage1.downsample.conv");
        assert_eq!(stem.class, LayerClass::FirstConvMac);
        assert_eq!(stem.rates, vec![1.0, 1.0, 1.0]);
        assert_eq!(imported_row_energy_pj(&m, stem), 3.0 * E_MAC_PJ);

        // Every measured row is positive over exactly three steps; the two
        // documentation rows at the end price zero.
        for r in &rows {
            assert_eq!(r.rates.len(), 3, "{}", r.name);
            let e = imported_row_energy_pj(&m, r);
            if r.class.is_zero_cost() {
                assert_eq!(e, 0.0);
            } else {
                assert!(e > 0.0, "{}", r.name);
            }
        }

        // Template-only table: the amortized per-frame figure is the total
        // divided by the interval, exactly.
        let rep = report_from_table(&m, &rows, 25);
        assert_eq!(rep.search_b_pj, 0.0);
        assert_eq!(rep.per_frame_b_pj, rep.total_b_pj / 25.0);
        let sum: f64 = rep.rows.iter().map(|r| r.energy_b_pj).sum();
        assert!((rep.total_b_pj - sum).abs() <= 1e-6 * sum);
    }
}
