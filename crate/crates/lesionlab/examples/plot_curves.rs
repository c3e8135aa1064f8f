//! Trains the same stage at two learning rates, writes both curve CSVs, and
//! renders an overlaid SVG loss chart (solid train, dashed valid).

use lesionlab::cli::{line_chart_svg, Series};
use lesionlab::datakit::{PhantomConfig, Profile};
use lesionlab::nets::{init_params, BackboneSpec};
use lesionlab::trainer::{run_stage, Stage, StageConfig};
use std::fs;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from("target/examples_out/plot_curves");
    fs::create_dir_all(&out)?;
    let samples = PhantomConfig::new(Profile::Cr).with_size(16).generate(12, 9)?;
    let (train, valid) = samples.split_at(9);
    let spec = BackboneSpec::vgg13().with_width_mult(0.0625).with_input_size(16);
    let init = init_params(&spec, &Stage::COnly.required_heads(), 0)?;

    let mut series = Vec::new();
    for (label, lr) in [("lr_1e-3", 1e-3), ("lr_1e-4", 1e-4)] {
        let config = StageConfig::new(Stage::COnly, 8)
            .with_batch_size(4)
            .with_learning_rate(lr)
            .with_seed(5);
        let outcome = run_stage(&config, train, valid, &init)?;
        fs::write(out.join(format!("{label}.csv")), outcome.curve.to_csv())?;
        for (split, dashed) in [("train", false), ("valid", true)] {
            let points = outcome
                .curve
                .epochs
                .iter()
                .map(|rec| {
                    let losses = if dashed { &rec.valid.losses } else { &rec.train.losses };
                    (rec.epoch as f64, losses.l_total)
                })
                .collect();
            series.push(Series { label: format!("{label} {split}"), points, dashed });
        }
    }

    let svg = line_chart_svg("total loss by learning rate", "epoch", "loss", &series);
    let path = out.join("loss_vs_epoch.svg");
    fs::write(&path, &svg)?;
    println!("wrote {} ({} series, {} bytes)", path.display(), series.len(), svg.len());
    println!("curve CSVs next to it can also be fed to the plot subcommand");
    Ok(())
}
