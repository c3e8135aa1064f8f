//! Runs the full three-stage procedure (classification, segmentation, then
//! detection refinement) with automatic weight transfer between stages, and
//! prints what each stage preloaded.

use lesionlab::datakit::{PhantomConfig, Profile};
use lesionlab::nets::{init_params, BackboneSpec, TaskHead};
use lesionlab::trainer::{load_checkpoint, run_pipeline, Stage, StageConfig, StageRun};
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from("target/examples_out/staged_pipeline");
    let size = 16;
    let gen = |profile, count, seed| PhantomConfig::new(profile).with_size(size).generate(count, seed);
    let split = |v: Vec<_>| {
        let valid = v.len() / 4;
        let train = v.len() - valid;
        let mut v = v;
        let valid_part = v.split_off(train);
        (v, valid_part)
    };
    let (cr_train, cr_valid) = split(gen(Profile::Cr, 12, 1)?);
    let (sr_train, sr_valid) = split(gen(Profile::Sr, 8, 2)?);
    let (dr_train, dr_valid) = split(gen(Profile::Dr, 8, 3)?);

    let spec = BackboneSpec::vgg13().with_width_mult(0.0625).with_input_size(size);
    let init = init_params(&spec, &TaskHead::ALL, 0)?;

    // Consecutive stages chain automatically: each preloads the previous
    // stage's best checkpoint (encoder plus the heads both stages train).
    let stages = [
        StageRun { config: StageConfig::new(Stage::Cr, 2).with_seed(10), train: &cr_train, valid: &cr_valid },
        StageRun { config: StageConfig::new(Stage::Sr, 2).with_seed(11), train: &sr_train, valid: &sr_valid },
        StageRun { config: StageConfig::new(Stage::Dr, 2).with_seed(12), train: &dr_train, valid: &dr_valid },
    ];
    let report = run_pipeline(&stages, &init, &out)?;

    for summary in &report.stages {
        println!(
            "{:<4} best epoch {} valid l_total {:.4} {} {:.4} -> {}",
            summary.stage.name(),
            summary.best_epoch,
            summary.final_valid_total,
            summary.metric_name,
            summary.final_valid_metric,
            summary.dir.display()
        );
    }

    // Provenance records exactly what each stage copied in.
    for dir in ["02_sr", "03_dr"] {
        let (store, _) = load_checkpoint(&out.join(dir).join("final"))?;
        for line in &store.provenance {
            println!("{dir}: {line}");
        }
    }
    Ok(())
}
