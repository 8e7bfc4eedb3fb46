//! Throwaway timing/feasibility probe (ignored; not part of the suite).

use std::time::Instant;

use diffuma_core::data::{generate_synthetic, Motif, SynthSpec};
use diffuma_core::diffusion::{build_noise_schedule, default_beta_range, NoiseSchedule};
use diffuma_core::train::{
    compute_losses, predict, train_loop, Adam, ForwardFlags, TrainOptions,
};
use diffuma_core::{Model, ModelConfig, Tape, Tensor};

fn schedule_for(model: &Model) -> NoiseSchedule {
    let (b0, b1) = default_beta_range(model.config.t_diff);
    build_noise_schedule(model.config.t_diff, b0, b1).unwrap()
}

#[test]
#[ignore]
fn probe_micro_forward_time() {
    let config = ModelConfig {
        d: 4,
        n: 2,
        l_blocks: 1,
        k_t: 3,
        residual: true,
        n_dit_blocks: 1,
        patch_size: 4,
        d_c: 4,
        t_diff: 4,
        lambda: 1.0,
        channels: 1,
        height: 8,
        width: 8,
        t_in: 2,
        t_out: 2,
    };
    let model = Model::new(config, 0).unwrap();
    let schedule = schedule_for(&model);
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::randn(&[1, 2, 1, 8, 8], &mut rng);
    let y = Tensor::<f64>::randn(&[1, 2, 1, 8, 8], &mut rng);
    let eps = Tensor::<f64>::randn(&[1, 2, 1, 8, 8], &mut rng);
    let t = vec![2usize];

    let start = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let mut tape: Tape<f64> = Tape::new();
        let bound = model.bind(&mut tape, false);
        let nodes = compute_losses(
            &mut tape, &model, &bound, &x, &y, &t, &eps, &schedule,
            ForwardFlags::default(),
        )
        .unwrap();
        std::hint::black_box(tape.value(nodes.l_total));
    }
    let per = start.elapsed() / reps;
    println!(
        "micro f64 forward: {per:?}; est. gradcheck for 4853 params ≈ {:?}",
        per * (4853 * 2 + 200) as u32
    );
}

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

#[test]
#[ignore]
fn probe_overfit_500() {
    let lr = env_f64("LR", 3e-4);
    let steps = env_usize("STEPS", 500);
    let disable = env_usize("DISABLE", 0) != 0;
    let flags = ForwardFlags { disable_diffusion: disable, zero_context: false };
    let segment = 100.min(steps);
    println!("overfit probe: lr {lr} steps {steps} disable_diffusion {disable}");
    let spec = SynthSpec { n_samples: 8, frames: 10, height: 32, width: 32, t_in: 5, seed: 7 };
    let data = generate_synthetic(Motif::BouncingBlob, &spec).unwrap();
    let config = ModelConfig::desk(1, 32, 32, 5, 5);
    let mut model = Model::new(config, 1).unwrap();
    let schedule = schedule_for(&model);
    let mut opt = Adam::new(&model.store, lr);
    let mut records = Vec::new();
    let start = Instant::now();
    let mut done = 0usize;
    while done < steps {
        let chunk = segment.min(steps - done);
        let opts = TrainOptions {
            steps: done + chunk,
            batch_size: 4,
            seed: 7 + (done / segment) as u64,
            flags,
            checkpoint_path: None,
            checkpoint_every: 0,
            config_text: String::new(),
        };
        train_loop(&mut model, &mut opt, &schedule, &data, &opts, |r| {
            records.push(*r);
            Ok(())
        })
        .unwrap();
        done += chunk;
        let r = records.last().unwrap();
        let pred = predict(&model, &data.input_frames(), flags).unwrap();
        let rep =
            diffuma_core::metrics::compare_sequences(&pred.fused, &data.target_frames()).unwrap();
        let rep_seq =
            diffuma_core::metrics::compare_sequences(&pred.sequence_only, &data.target_frames())
                .unwrap();
        println!(
            "step {:>4} l_diff {:.5} l_recon {:.5} l_total {:.5} | fused SSIM {:.4} seq SSIM {:.4}",
            done, r.report.l_diff, r.report.l_recon, r.report.l_total, rep.ssim, rep_seq.ssim
        );
    }
    println!("{steps} steps in {:?}", start.elapsed());
    let first = records[0].report.l_total;
    let last = records.last().unwrap().report.l_total;
    println!("first {first} last {last} ratio {}", last / first);
    let decomp_ok = records.iter().all(|r| r.report.decomposes_exactly());
    println!("decomposition exact at every step: {decomp_ok}");

    let x = data.input_frames();
    let pred = predict(&model, &x, ForwardFlags::default()).unwrap();
    let rep = diffuma_core::metrics::compare_sequences(&pred.fused, &data.target_frames()).unwrap();
    println!("train-target SSIM {:.4} mse {:.5} mae {:.5}", rep.ssim, rep.mse, rep.mae);
    let rep_seq =
        diffuma_core::metrics::compare_sequences(&pred.sequence_only, &data.target_frames())
            .unwrap();
    println!("sequence-only SSIM {:.4}", rep_seq.ssim);
}

#[test]
#[ignore]
fn probe_grad_norms() {
    use diffuma_core::train::{gather_batch, train_step};
    let steps_before = env_usize("WARM", 100);
    let lr = env_f64("LR", 3e-4);
    let spec = SynthSpec { n_samples: 8, frames: 10, height: 32, width: 32, t_in: 5, seed: 7 };
    let data = generate_synthetic(Motif::BouncingBlob, &spec).unwrap();
    let config = ModelConfig::desk(1, 32, 32, 5, 5);
    let mut model = Model::new(config, 1).unwrap();
    let schedule = schedule_for(&model);
    let mut opt = Adam::new(&model.store, lr);
    for step in 1..=steps_before {
        let idx = diffuma_core::train::batch_indices(8, 4, step, 7);
        let (x, y) = gather_batch(&data, &idx);
        train_step(&mut model, &mut opt, &schedule, &x, &y, step, 7, ForwardFlags::default())
            .unwrap();
    }
    // One loss evaluation with per-group gradient norms, split by term.
    let idx = diffuma_core::train::batch_indices(8, 4, steps_before + 1, 7);
    let (x, y) = gather_batch(&data, &idx);
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(999);
    let t: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=schedule.t_diff())).collect();
    let eps = Tensor::<f32>::randn(x.shape(), &mut rng);
    for (label, node_sel) in [("l_diff", 0usize), ("l_recon", 1), ("l_total", 2)] {
        let mut tape: Tape<f32> = Tape::new();
        let bound = model.bind(&mut tape, true);
        let nodes = compute_losses(
            &mut tape, &model, &bound, &x, &y, &t, &eps, &schedule,
            ForwardFlags::default(),
        )
        .unwrap();
        let target = [nodes.l_diff, nodes.l_recon, nodes.l_total][node_sel];
        tape.backward(target);
        let mut groups: std::collections::BTreeMap<String, f64> = Default::default();
        let mut total = 0.0f64;
        for pid in model.store.ids() {
            let name = model.store.name(pid).to_string();
            let prefix = name.split('.').next().unwrap_or("?").to_string();
            let prefix = prefix.trim_end_matches(char::is_numeric).to_string();
            let sq: f64 = tape
                .grad(bound.tensor(pid))
                .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum())
                .unwrap_or(0.0);
            *groups.entry(prefix).or_default() += sq;
            total += sq;
        }
        let parts: Vec<String> =
            groups.iter().map(|(k, v)| format!("{k} {:.3e}", v.sqrt())).collect();
        println!(
            "after {steps_before} steps, d{label}: global {:.3e} | {}",
            total.sqrt(),
            parts.join(" | ")
        );
    }
}

#[test]
#[ignore]
fn probe_ordering() {
    let spec = SynthSpec { n_samples: 64, frames: 6, height: 16, width: 16, t_in: 3, seed: 21 };
    let data = generate_synthetic(Motif::BouncingBlob, &spec).unwrap();
    let full = data.tensor();
    let per = full.numel() / 64;
    let train_t = Tensor::new(&[32, 6, 1, 16, 16], full.data()[..32 * per].to_vec());
    let hold_t = Tensor::new(&[32, 6, 1, 16, 16], full.data()[32 * per..].to_vec());
    let train = diffuma_core::FrameSequence::new(train_t, 3, 3).unwrap();
    let hold = diffuma_core::FrameSequence::new(hold_t, 3, 3).unwrap();

    let config = ModelConfig {
        d: 32,
        n: 8,
        l_blocks: 2,
        k_t: 3,
        residual: true,
        n_dit_blocks: 2,
        patch_size: 4,
        d_c: 32,
        t_diff: 100,
        lambda: 1.0,
        channels: 1,
        height: 16,
        width: 16,
        t_in: 3,
        t_out: 3,
    };
    let steps = 200;
    let started = Instant::now();
    let mut wins = 0;
    for seed in 0..5u64 {
        let mut ssims = [0.0f64; 2];
        for (slot, disable) in [(0usize, false), (1usize, true)] {
            let mut model = Model::new(config.clone(), seed).unwrap();
            let schedule = schedule_for(&model);
            let mut opt = Adam::new(&model.store, 1e-3);
            let flags = ForwardFlags { disable_diffusion: disable, zero_context: false };
            let opts = TrainOptions {
                steps,
                batch_size: 8,
                seed,
                flags,
                checkpoint_path: None,
                checkpoint_every: 0,
                config_text: String::new(),
            };
            train_loop(&mut model, &mut opt, &schedule, &train, &opts, |_| Ok(())).unwrap();
            let pred = predict(&model, &hold.input_frames(), flags).unwrap();
            let rep =
                diffuma_core::metrics::compare_sequences(&pred.fused, &hold.target_frames())
                    .unwrap();
            ssims[slot] = rep.ssim;
        }
        let win = ssims[0] >= ssims[1];
        wins += win as usize;
        println!(
            "seed {seed}: full {:.5} ablated {:.5} -> {}",
            ssims[0], ssims[1], if win { "full" } else { "ablated" }
        );
    }
    println!("wins {wins}/5 in {:?}", started.elapsed());
}
