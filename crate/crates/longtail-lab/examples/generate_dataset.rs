//! Generate the reference long-tail benchmark and describe what came out:
//! the count law per class bin, split sizes, and pseudo-image packing.

use longtail_lab::catalog::{bin_of, NUM_BINS};
use longtail_lab::synthdata::{generate, SynthConfig};

fn main() -> longtail_lab::Result<()> {
    let config = SynthConfig::default();
    let dataset = generate(&config)?;

    println!(
        "{} foreground classes, feature dim {}, seed {}",
        config.num_foreground, config.feature_dim, config.seed
    );

    let counts = dataset.catalog.counts();
    let mut classes = [0usize; NUM_BINS];
    let mut instances = [0u64; NUM_BINS];
    for &n in counts {
        let b = bin_of(n) - 1;
        classes[b] += 1;
        instances[b] += n;
    }
    println!("\n{:<18} {:>8} {:>10}", "count bin", "classes", "instances");
    let labels = ["bin 1 [1,10)", "bin 2 [10,100)", "bin 3 [100,1000)", "bin 4 [1000,+)"];
    for b in 0..NUM_BINS {
        println!("{:<18} {:>8} {:>10}", labels[b], classes[b], instances[b]);
    }
    println!(
        "\ncounts span {}..{}",
        counts.iter().min().unwrap(),
        counts.iter().max().unwrap()
    );

    let bg_train =
        dataset.train.labels.iter().filter(|&&l| l == 0).count();
    println!(
        "\ntrain: {} proposals in {} pseudo-images ({} background, {} foreground)",
        dataset.train.len(),
        dataset.images.len(),
        bg_train,
        dataset.train.len() - bg_train
    );
    let bg_eval = dataset.eval.labels.iter().filter(|&&l| l == 0).count();
    println!(
        "eval:  {} records ({} background, {} per foreground class)",
        dataset.eval.len(),
        bg_eval,
        config.eval_per_class
    );
    Ok(())
}
