use oddsprobe::artifacts::{load_attack_batch, load_dataset, load_model};
use oddsprobe::data::Split;
use oddsprobe::noise::{NoiseSource, NoiseSpec};
use oddsprobe::Result;

fn main() -> Result<()> {
    let root = std::path::PathBuf::from(std::env::args().nth(1).expect("root dir"));
    let model = load_model(&root.join("model"))?;
    let dataset = load_dataset(&root.join("dataset"))?;
    let batch = load_attack_batch(&root.join("attacks/pgd_linf_test"))?;

    let (test_x, test_y) = dataset.gather(Split::Test);
    let draws = 128usize;
    let cap = 200usize;

    for &mag in &[0.01, 0.03, 0.06, 0.12, 0.25, 0.5, 1.0, 2.0] {
        let spec = NoiseSpec::new(NoiseSource::Gaussian, mag, draws, 99)?;

        // adversarial: statistic toward the natural class
        let mut adv_stats = Vec::new();
        for (i, adv) in batch.adversarial.iter().enumerate().take(cap) {
            if !batch.success[i] {
                continue;
            }
            let y_nat = batch.source_labels[i];
            let y_adv = model.predict(adv)?;
            if y_adv == y_nat {
                continue;
            }
            let base = model.log_odds(adv, y_adv, y_nat)?;
            let mut acc = 0.0;
            for d in 0..draws {
                let eta = spec.sample(&model.input_shape(), d as u64);
                let noisy = adv.add(&eta)?.clamp01();
                acc += model.log_odds(&noisy, y_adv, y_nat)? - base;
            }
            adv_stats.push(acc / draws as f64);
        }

        // clean: max statistic over z != y
        let mut clean_stats = Vec::new();
        for (x, &y_true) in test_x.iter().zip(&test_y).take(cap) {
            let y = model.predict(x)?;
            if y != y_true {
                continue;
            }
            let k = model.num_classes();
            let mut per_z = vec![0.0; k];
            let base: Vec<f64> = (0..k)
                .map(|z| model.log_odds(x, y, z))
                .collect::<Result<_>>()?;
            for d in 0..draws {
                let eta = spec.sample(&model.input_shape(), d as u64);
                let noisy = x.add(&eta)?.clamp01();
                for (z, pz) in per_z.iter_mut().enumerate() {
                    if z != y {
                        *pz += model.log_odds(&noisy, y, z)? - base[z];
                    }
                }
            }
            let best = per_z
                .iter()
                .enumerate()
                .filter(|(z, _)| *z != y)
                .map(|(_, v)| v / draws as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            clean_stats.push(best);
        }

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
        };
        let mut sorted = clean_stats.clone();
        sorted.sort_by(f64::total_cmp);
        let q99 = sorted[(0.99 * (sorted.len() - 1) as f64) as usize];
        let frac = adv_stats.iter().filter(|&&a| a > q99).count() as f64 / adv_stats.len() as f64;
        println!(
            "mag {:5.2} | clean {:+.3} ± {:.3} (q99 {:+.3}) | adv {:+.3} ± {:.3} | adv>q99 {:.2}",
            mag,
            mean(&clean_stats),
            sd(&clean_stats),
            q99,
            mean(&adv_stats),
            sd(&adv_stats),
            frac
        );
    }
    Ok(())
}
