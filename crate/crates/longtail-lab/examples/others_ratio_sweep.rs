//! Sweep the others sampling ratio β of the group softmax head.
//!
//! β controls how many out-of-group proposals each group's "others" slot
//! trains on per batch (m_n = β · ΣN_batch). Too few and cross-group scores
//! are uncalibrated; too many and the others slot drowns out the members.
//! Overall accuracy should peak at an interior β.

use longtail_lab::catalog::{default_boundaries, GroupPartition};
use longtail_lab::head::HeadLayout;
use longtail_lab::inference::BagsPredictor;
use longtail_lab::metrics::evaluate;
use longtail_lab::synthdata::{generate, SynthConfig};
use longtail_lab::train::{train, Method, TrainConfig};

fn main() -> longtail_lab::Result<()> {
    let dataset = generate(&SynthConfig::default())?;
    let boundaries = default_boundaries();

    println!("{:>5} {:>8} {:>8} {:>8}", "beta", "overall", "bin1", "bin4");
    let mut best = (f64::NEG_INFINITY, 0.0);
    for beta in [0.0, 1.0, 2.0, 4.0, 8.0, 16.0] {
        let partition = GroupPartition::assign(&dataset.catalog, &boundaries)?;
        let config = TrainConfig { method: Method::Bags, beta, ..TrainConfig::default() };
        let (params, _) = train(&dataset, HeadLayout::Bags { partition }, &config, None)?;
        let report =
            evaluate(&BagsPredictor::new(&params)?, &dataset.eval, &dataset.catalog, "bags")?;
        println!(
            "{:>5} {:>8.4} {:>8.4} {:>8.4}",
            beta,
            report.overall_acc,
            report.acc_per_bin[0].unwrap_or(f64::NAN),
            report.acc_per_bin[3].unwrap_or(f64::NAN)
        );
        if report.overall_acc > best.0 {
            best = (report.overall_acc, beta);
        }
    }
    println!("\nbest overall accuracy {:.4} at beta = {}", best.0, best.1);
    Ok(())
}
