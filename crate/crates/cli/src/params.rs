use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;

use csd_core::model::{EnhanceModel, ModelConfig, REFERENCE_PARAMS_M};

use crate::common::{create_dir, echo_config, write_text, CliResult, ConfigArgs};

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Also write `layers.csv`, `totals.csv` and `resolved.cfg` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn shape_text(dims: [usize; 4]) -> String {
    dims.map(|d| d.to_string()).join("x")
}

pub fn run(args: &ParamsArgs) -> CliResult {
    let cfg = args.cfg.resolve()?;
    let model = EnhanceModel::build(&cfg.model, 0)?;
    let rows = model.param_table();

    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:>16}  {:>10}", "name", "shape", "params");
    let mut layers = String::from("name,shape,params\n");
    for r in &rows {
        let shape = shape_text(r.shape.0);
        println!("{:<width$}  {shape:>16}  {:>10}", r.name, r.count);
        let _ = writeln!(layers, "{},{shape},{}", r.name, r.count);
    }
    let total = model.count_params();
    println!("{:<width$}  {:>16}  {total:>10}", "total", "");
    println!();

    let mut totals = String::from("model,params,params_m,reference_m\n");
    let _ = writeln!(totals, "config,{total},{:.4},", total as f64 / 1e6);
    println!("{:<12} {:>10} {:>10} {:>12}", "model", "params", "millions", "reference M");
    println!("{:<12} {total:>10} {:>10.4} {:>12}", "config", total as f64 / 1e6, "-");
    for (name, reference) in REFERENCE_PARAMS_M {
        let count = EnhanceModel::build(&ModelConfig::preset(name)?, 0)?.count_params();
        println!("{name:<12} {count:>10} {:>10.4} {reference:>12.4}", count as f64 / 1e6);
        let _ = writeln!(totals, "{name},{count},{:.4},{reference}", count as f64 / 1e6);
    }

    if let Some(out) = &args.out {
        create_dir(out)?;
        echo_config(out, &cfg.resolved())?;
        write_text(&out.join("layers.csv"), &layers)?;
        write_text(&out.join("totals.csv"), &totals)?;
    }
    Ok(())
}
