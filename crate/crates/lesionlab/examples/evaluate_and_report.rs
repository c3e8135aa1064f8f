//! Trains a short segmentation stage, evaluates the best checkpoint on a
//! held-out split, and prints the full metric tables plus the JSON report.

use lesionlab::cli::evaluate_store;
use lesionlab::datakit::{PhantomConfig, Profile};
use lesionlab::nets::{init_params, BackboneSpec};
use lesionlab::trainer::{run_stage, Stage, StageConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = PhantomConfig::new(Profile::Sr).with_size(16).generate(16, 6)?;
    let (train, rest) = samples.split_at(10);
    let (valid, test) = rest.split_at(3);

    let spec = BackboneSpec::vgg13().with_width_mult(0.125).with_input_size(16);
    let init = init_params(&spec, &Stage::Sr.required_heads(), 0)?;
    let config = StageConfig::new(Stage::Sr, 10).with_batch_size(5).with_seed(3);
    let outcome = run_stage(&config, train, valid, &init)?;
    println!(
        "trained {} epochs, best epoch {} (valid l_total {:.4})",
        config.epochs,
        outcome.best_epoch,
        outcome.curve.epochs[outcome.best_epoch - 1].valid.losses.l_total
    );

    // The report covers every task the checkpoint and annotations support:
    // here segmentation (pooled pixel metrics) and reconstruction MSE.
    let report = evaluate_store(&outcome.best_params, test, "test")?;
    print!("{}", report.to_tables());
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
