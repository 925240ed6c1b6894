//! Which parts of the group-softmax head actually matter?
//!
//! Trains three variants on the same dataset and seed:
//!   1. grouping only (no others slots, background inside the top group)
//!   2. grouping + per-group others slots
//!   3. the full head: others slots + the dedicated background group
//!
//! Expected ordering in overall accuracy: (3) > (2) > (1).

use longtail_lab::catalog::{default_boundaries, GroupPartition};
use longtail_lab::head::HeadLayout;
use longtail_lab::inference::BagsPredictor;
use longtail_lab::metrics::evaluate;
use longtail_lab::synthdata::{generate, SynthConfig};
use longtail_lab::train::{train, Method, TrainConfig};

fn main() -> longtail_lab::Result<()> {
    let dataset = generate(&SynthConfig::default())?;
    let config = TrainConfig { method: Method::Bags, ..TrainConfig::default() };
    let boundaries = default_boundaries();

    let variants = [
        ("grouping only", false, false),
        ("+ others slots", true, false),
        ("+ background group", true, true),
    ];
    println!("{:<22} {:>8} {:>8} {:>8}", "variant", "overall", "bin1", "bg");
    for (name, has_others, has_g0) in variants {
        let partition =
            GroupPartition::assign_with_options(&dataset.catalog, &boundaries, has_others, has_g0)?;
        let (params, _) = train(&dataset, HeadLayout::Bags { partition }, &config, None)?;
        let predictor = BagsPredictor::new(&params)?;
        let report = evaluate(&predictor, &dataset.eval, &dataset.catalog, name)?;
        println!(
            "{:<22} {:>8.4} {:>8.4} {:>8.4}",
            name,
            report.overall_acc,
            report.acc_per_bin[0].unwrap_or(f64::NAN),
            report.acc_bg
        );
    }
    Ok(())
}
