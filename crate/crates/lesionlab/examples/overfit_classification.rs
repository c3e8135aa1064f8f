//! Overfits the classification stage on eight samples until training
//! accuracy reaches 1.0, the standard sanity check that the composite loss
//! actually moves the shared encoder and head.

use lesionlab::datakit::{PhantomConfig, Profile};
use lesionlab::nets::{decode_cls, encode, init_params, BackboneSpec};
use lesionlab::trainer::{run_stage, Stage, StageConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = PhantomConfig::new(Profile::Cr).with_size(16).generate(8, 5)?;
    let spec = BackboneSpec::vgg13().with_width_mult(0.125).with_input_size(16);
    let init = init_params(&spec, &Stage::COnly.required_heads(), 0)?;

    // Train and validate on the same eight samples: overfitting is the goal.
    let config = StageConfig::new(Stage::COnly, 200)
        .with_batch_size(8)
        .with_learning_rate(3e-3)
        .with_seed(1);
    let outcome = run_stage(&config, &samples, &samples, &init)?;

    let reached = outcome
        .curve
        .epochs
        .iter()
        .find(|rec| rec.train.metric_value >= 1.0)
        .map(|rec| rec.epoch);
    for rec in outcome.curve.epochs.iter().step_by(20) {
        println!(
            "epoch {:>3}  loss {:.4}  accuracy {:.3}",
            rec.epoch, rec.train.losses.l_total, rec.train.metric_value
        );
    }
    match reached {
        Some(epoch) => println!("train accuracy hit 1.0 at epoch {epoch}"),
        None => println!("train accuracy never reached 1.0 in {} epochs", config.epochs),
    }

    // Confirm by running the trained model over the training set directly.
    let mut correct = 0;
    for sample in &samples {
        let pyramid = encode(&outcome.params, &sample.image)?;
        let probs = decode_cls(&outcome.params, &pyramid)?;
        let pred = (0..3).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
        if pred == sample.class_label.unwrap().index() {
            correct += 1;
        }
    }
    println!("final model classifies {correct}/{} training samples correctly", samples.len());
    Ok(())
}
