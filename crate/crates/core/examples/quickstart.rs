//! Trains a small TSP model for a few epochs, then compares every inference
//! method with the exact optimum on a handful of 8-node instances.
//!
//! cargo run --release -p latent-routing --example quickstart

use latent_routing::inference::{self, InferenceConfig, Method};
use latent_routing::model::{Model, ModelConfig};
use latent_routing::oracle;
use latent_routing::problems::{generate_instance, ProblemKind};
use latent_routing::training::{greedy_cost, train, InstanceSource, TrainConfig};

fn main() -> latent_routing::Result<()> {
    let kind = ProblemKind::Tsp;
    let held: Vec<_> = (0..8)
        .map(|i| generate_instance(kind, 8, 10_000 + i))
        .collect::<latent_routing::Result<_>>()?;
    let mut model = Model::init(ModelConfig::desk(kind), 0)?;
    println!("greedy cost before training: {:.4}", greedy_cost(&model, &held)?);
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 32,
        ..TrainConfig::default()
    };
    train(&mut model, &cfg, &InstanceSource::Generator { kind, n: 8 }, 0, |_, r| {
        if (r.epoch + 1) % 10 == 0 {
            println!("epoch {:>3}: mean sampled cost {:.4}", r.epoch, r.mean_cost);
        }
        Ok(())
    })?;
    println!("greedy cost after training:  {:.4}", greedy_cost(&model, &held)?);

    let optimum: f64 = held
        .iter()
        .map(|i| oracle::brute_force(i).map(|s| s.cost))
        .sum::<latent_routing::Result<f64>>()?
        / held.len() as f64;
    println!("mean optimum: {optimum:.4}");
    for method in Method::ALL {
        let mut total = 0.0;
        for (i, inst) in held.iter().enumerate() {
            let cfg = InferenceConfig {
                particles: 8,
                iterations: 20,
                seed: i as u64,
                ..InferenceConfig::new(method, kind)
            };
            total += inference::run(&model, inst, &cfg)?.best.cost;
        }
        let mean = total / held.len() as f64;
        println!("{:<17} mean best {mean:.4}  gap {:.3}%", method.name(), (mean / optimum - 1.0) * 100.0);
    }
    Ok(())
}
