use serde::Serialize;

use symtrans_core::cemsa::{self, BlockCount};
use symtrans_core::model::{make_ablation, ModelConfig, Placement, StageCost, SymTrans, STAGES};

use crate::cli::{CountArgs, Preset};
use crate::commands::print_json;
use crate::config;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Breakdown {
    pub attention: usize,
    pub ffn: usize,
    pub norms: usize,
    pub total: usize,
}

impl From<BlockCount> for Breakdown {
    fn from(c: BlockCount) -> Self {
        Self {
            attention: c.attention,
            ffn: c.ffn,
            norms: c.norms,
            total: c.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MsaComparison {
    pub stage: usize,
    pub dim: usize,
    pub heads: usize,
    pub tokens: usize,
    pub kernel: usize,
    pub effective_kernel: usize,
    pub groups: usize,
    pub cemsa: Breakdown,
    pub msa: Breakdown,
    /// CEMSA total over MSA total.
    pub ratio: f64,
    pub cemsa_fewer: bool,
    pub cemsa_macs: u64,
    pub msa_macs: u64,
    /// Grouped-conv weights at the configured groups and at `g = 1`.
    pub grouped_weights: usize,
    pub grouped_weights_dense: usize,
    /// `grouped_weights · g == grouped_weights_dense`.
    pub grouped_exact_inverse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountReport {
    pub placement: Placement,
    pub input_shape: [usize; 3],
    pub stages: Vec<StageCost>,
    pub total_params: usize,
    pub total_macs: u64,
    pub cemsa_blocks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msa_comparison: Option<Vec<MsaComparison>>,
}

pub fn compare_msa(cfg: &ModelConfig) -> Vec<MsaComparison> {
    (0..STAGES)
        .map(|i| {
            let c = cfg.cemsa_config(i);
            let ours: Breakdown = cemsa::count_parameters(&c).into();
            let msa: Breakdown = cemsa::count_standard_parameters(c.dim, c.ffn_expansion).into();
            let grouped = cemsa::grouped_conv_weights(c.dim, c.groups);
            let dense = cemsa::grouped_conv_weights(c.dim, 1);
            MsaComparison {
                stage: i,
                dim: c.dim,
                heads: c.heads,
                tokens: c.tokens(),
                kernel: c.dw_kernel,
                effective_kernel: c.effective_kernel(),
                groups: c.groups,
                cemsa: ours,
                msa,
                ratio: ours.total as f64 / msa.total as f64,
                cemsa_fewer: ours.total < msa.total,
                cemsa_macs: cemsa::count_flops(&c),
                msa_macs: cemsa::count_standard_flops(c.dim, c.tokens(), c.ffn_expansion),
                grouped_weights: grouped,
                grouped_weights_dense: dense,
                grouped_exact_inverse: grouped * c.groups == dense,
            }
        })
        .collect()
}

pub fn report(cfg: &ModelConfig, with_msa: bool) -> Result<CountReport> {
    let model = SymTrans::new(cfg)?;
    let stages = model.stage_costs();
    Ok(CountReport {
        placement: cfg.placement,
        input_shape: cfg.input_shape,
        total_params: model.num_params(),
        total_macs: stages.iter().map(|s| s.macs).sum(),
        cemsa_blocks: stages.iter().map(|s| s.cemsa_blocks).sum(),
        stages,
        msa_comparison: with_msa.then(|| compare_msa(cfg)),
    })
}

fn table(r: &CountReport) -> String {
    let [d, h, w] = r.input_shape;
    let mut s = format!("placement {}, input {}x{}x{}\n", r.placement.name(), d, h, w);
    s.push_str(&format!("{:<8} {:>12} {:>16} {:>6}\n", "stage", "params", "MACs", "cemsa"));
    for st in &r.stages {
        s.push_str(&format!("{:<8} {:>12} {:>16} {:>6}\n", st.name, st.params, st.macs, st.cemsa_blocks));
    }
    s.push_str(&format!("{:<8} {:>12} {:>16} {:>6}\n", "total", r.total_params, r.total_macs, r.cemsa_blocks));
    if let Some(cmp) = &r.msa_comparison {
        s.push_str(&format!(
            "\n{:<6} {:>4} {:>5} {:>6} {:>4} {:>4} {:>10} {:>10} {:>7} {:>6} {:>9} {:>9} {:>5}\n",
            "stage", "dim", "heads", "tokens", "s", "g", "cemsa", "msa", "ratio", "fewer", "gconv(g)", "gconv(1)", "1/g"
        ));
        for c in cmp {
            s.push_str(&format!(
                "{:<6} {:>4} {:>5} {:>6} {:>4} {:>4} {:>10} {:>10} {:>7.3} {:>6} {:>9} {:>9} {:>5}\n",
                c.stage,
                c.dim,
                c.heads,
                c.tokens,
                c.effective_kernel,
                c.groups,
                c.cemsa.total,
                c.msa.total,
                c.ratio,
                if c.cemsa_fewer { "yes" } else { "no" },
                c.grouped_weights,
                c.grouped_weights_dense,
                if c.grouped_exact_inverse { "exact" } else { "no" }
            ));
        }
    }
    s
}

pub fn run(args: &CountArgs) -> Result<()> {
    let base = match (&args.config, args.preset) {
        (Some(path), _) => config::load::<ModelConfig>(path)?,
        (None, Some(Preset::Paper)) => ModelConfig::paper(),
        (None, _) => ModelConfig::desk(),
    };
    base.validate()?;
    let cfg = match args.placement {
        Some(p) => make_ablation(&base, p.into()),
        None => base,
    };
    let r = report(&cfg, args.compare_msa)?;
    if args.json {
        print_json(&r);
    } else {
        print!("{}", table(&r));
    }
    Ok(())
}
