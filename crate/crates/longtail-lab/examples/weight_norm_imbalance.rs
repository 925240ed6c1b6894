//! Reproduce the diagnosed failure mode of a plain softmax head on
//! long-tail data: classifier column norms grow with training-instance
//! count, so rarely-seen classes end up with tiny logits and vanish at
//! inference.

use longtail_lab::catalog::{bin_of, NUM_BINS};
use longtail_lab::head::HeadLayout;
use longtail_lab::metrics::norm_count_correlation;
use longtail_lab::synthdata::{generate, SynthConfig};
use longtail_lab::train::{train, TrainConfig};

fn main() -> longtail_lab::Result<()> {
    let dataset = generate(&SynthConfig::default())?;
    let config = TrainConfig::default();
    let layout = HeadLayout::Plain { num_foreground: dataset.catalog.num_foreground() };
    let (params, history) = train(&dataset, layout, &config, None)?;
    println!("trained plain softmax head for {} steps", history.steps);

    let norms = params.weight_norms();
    let mut bin_sum = [0.0; NUM_BINS];
    let mut bin_classes = [0usize; NUM_BINS];
    for (j, &n) in dataset.catalog.counts().iter().enumerate() {
        let b = bin_of(n) - 1;
        bin_sum[b] += norms.per_category[j + 1];
        bin_classes[b] += 1;
    }
    println!("\n{:<18} {:>12}", "count bin", "mean ||w||");
    let labels = ["bin 1 [1,10)", "bin 2 [10,100)", "bin 3 [100,1000)", "bin 4 [1000,+)"];
    for b in 0..NUM_BINS {
        println!("{:<18} {:>12.4}", labels[b], bin_sum[b] / bin_classes[b] as f64);
    }

    let r = norm_count_correlation(&norms, &dataset.catalog)?;
    println!("\npearson(||w_j||, log(1 + N_j)) = {:.3}", r);
    println!(
        "bin4/bin1 mean-norm ratio = {:.2}",
        (bin_sum[3] / bin_classes[3] as f64) / (bin_sum[0] / bin_classes[0] as f64)
    );
    Ok(())
}
