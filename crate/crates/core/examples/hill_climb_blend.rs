//! Rank-average blending by hill climbing with replacement. Three noisy
//! views of one signal plus a useless model; weights come out in
//! multiples of 1/14.

use kbforge::ensemble::{hill_climb_blend, Metric, PredictionMatrix};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rows = 60;
    let labels: Vec<f64> = (0..rows).map(|i| i as f64).collect();
    let noisy = |period: usize, scale: f64| -> Vec<f64> {
        (0..rows).map(|i| i as f64 + scale * (((i * period) % 11) as f64 - 5.0)).collect()
    };
    let useless: Vec<f64> = (0..rows).map(|i| ((i * 7) % 13) as f64).collect();
    let oof = PredictionMatrix::new(
        vec!["a".into(), "b".into(), "c".into(), "noise".into()],
        vec![noisy(3, 4.0), noisy(5, 5.0), noisy(7, 6.0), useless],
        Some(labels),
    )?;
    let fit = hill_climb_blend(&oof, Metric::RankCorrelation, 14)?;
    println!("best single: {} at {:.4}", fit.best_single.0, fit.best_single.1);
    println!("blend score: {:.4}", fit.score);
    for ((id, w), c) in fit.weights.weights.iter().zip(&fit.counts) {
        println!("  {id}: {c}/14 = {w:.4}");
    }
    Ok(())
}
