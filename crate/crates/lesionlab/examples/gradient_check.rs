//! Validates backpropagated gradients against central finite differences on
//! a tiny multi-task batch, one probed parameter per network region.

use lesionlab::datakit::{PhantomConfig, Profile};
use lesionlab::losses::TaskWeights;
use lesionlab::nets::{init_params, BackboneSpec, TaskHead};
use lesionlab::trainer::{batch_loss, loss_and_gradients};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples = PhantomConfig::new(Profile::Sr).with_size(16).generate(3, 8)?;
    let spec = BackboneSpec::vgg13().with_width_mult(0.125).with_input_size(16);
    let store = init_params(&spec, &[TaskHead::Segmentation, TaskHead::Reconstruction], 0)?;
    let weights = TaskWeights::new(0.0, 1.0, 1.0, 0.0)?;

    let (bundle, grads) = loss_and_gradients(&store, &samples, &weights)?;
    println!("composite loss {:.6} with {} gradient tensors", bundle.l_total, grads.len());

    let h = 1e-6;
    let probes = [
        "encoder.stage1.conv1.weight",
        "encoder.stage3.conv2.weight",
        "seg.up1.conv1.weight",
        "recon.out.bias",
    ];
    for name in probes {
        // Probe each tensor's strongest gradient entry.
        let (idx, &analytic) = grads[name]
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.abs().total_cmp(&b.abs()))
            .unwrap();
        let mut probe = |delta: f64| -> Result<f64, Box<dyn std::error::Error>> {
            let mut nudged = store.clone();
            *nudged.get_mut(name).unwrap().iter_mut().nth(idx).unwrap() += delta;
            Ok(batch_loss(&nudged, &samples, &weights)?.l_total)
        };
        let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        println!("{name:<28} analytic {analytic:+.3e} numeric {numeric:+.3e} rel err {rel:.2e}");
        assert!(rel < 1e-4, "gradient mismatch for {name}");
    }
    println!("all probed gradients agree with finite differences within 1e-4");
    Ok(())
}
