//! Trains the same classification stage with both encoder families and
//! compares parameter counts and loss trajectories side by side.

use lesionlab::datakit::{PhantomConfig, Profile};
use lesionlab::nets::{init_params, BackboneKind, BackboneSpec};
use lesionlab::trainer::{run_stage, Stage, StageConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = PhantomConfig::new(Profile::Cr).with_size(16).generate(12, 4)?;
    let (train, valid) = samples.split_at(9);

    for kind in [BackboneKind::Vgg13Style, BackboneKind::ResNet50Style] {
        let base = match kind {
            BackboneKind::Vgg13Style => BackboneSpec::vgg13(),
            BackboneKind::ResNet50Style => BackboneSpec::resnet50(),
        };
        let spec = base.with_width_mult(0.0625).with_input_size(16);
        let init = init_params(&spec, &Stage::Cr.required_heads(), 0)?;
        let scalars: usize = init.iter().map(|(_, arr)| arr.len()).sum();
        println!("{}: {} tensors, {} scalars", kind.name(), init.len(), scalars);

        let config = StageConfig::new(Stage::Cr, 5).with_batch_size(4).with_seed(2);
        let outcome = run_stage(&config, train, valid, &init)?;
        for rec in &outcome.curve.epochs {
            println!(
                "  epoch {} train {:.4} valid {:.4} accuracy {:.3}",
                rec.epoch, rec.train.losses.l_total, rec.valid.losses.l_total, rec.valid.metric_value
            );
        }
    }
    println!("both encoders expose the same five-level pyramid, so heads and stages are interchangeable");
    Ok(())
}
