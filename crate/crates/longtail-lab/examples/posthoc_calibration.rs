//! Post-hoc fixes that rebalance a trained softmax head without any
//! retraining: τ-normalization (divide each foreground column by ||w||^τ,
//! keeping the baseline's background decision) and nearest-class-mean
//! classification over the same frozen features.

use longtail_lab::head::HeadLayout;
use longtail_lab::inference::{NcmPredictor, PlainSoftmaxPredictor, TauSelectPredictor};
use longtail_lab::metrics::{evaluate, MetricsReport};
use longtail_lab::synthdata::{generate, SynthConfig};
use longtail_lab::train::{train, TrainConfig};

fn row(report: &MetricsReport) {
    println!(
        "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
        report.method,
        report.overall_acc,
        report.acc_per_bin[0].unwrap_or(f64::NAN),
        report.acc_per_bin[3].unwrap_or(f64::NAN),
        report.acc_bg
    );
}

fn main() -> longtail_lab::Result<()> {
    let dataset = generate(&SynthConfig::default())?;
    let layout = HeadLayout::Plain { num_foreground: dataset.catalog.num_foreground() };
    let (baseline, _) = train(&dataset, layout, &TrainConfig::default(), None)?;

    println!("{:<12} {:>8} {:>8} {:>8} {:>8}", "predictor", "overall", "bin1", "bin4", "bg");
    row(&evaluate(&PlainSoftmaxPredictor::new(&baseline)?, &dataset.eval, &dataset.catalog, "softmax")?);

    for tau in [0.5, 1.0] {
        let predictor = TauSelectPredictor::new(&baseline, tau)?;
        let name = format!("tau={tau}");
        row(&evaluate(&predictor, &dataset.eval, &dataset.catalog, &name)?);
    }

    let predictor = NcmPredictor::new(&baseline, &dataset.train)?;
    row(&evaluate(&predictor, &dataset.eval, &dataset.catalog, "ncm")?);

    Ok(())
}
