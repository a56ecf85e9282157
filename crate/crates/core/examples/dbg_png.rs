// debug: measure PNG complexity of constant vs noise images
use lrvae::data::{gen_constant, gen_noise};
use lrvae::scores::png_complexity_bits;

fn main() {
    for (name, b, ch, d) in [
        ("const1", gen_constant(100, 1, 4).unwrap(), 1usize, 1024.0),
        ("noise1", gen_noise(100, 1, 4).unwrap(), 1, 1024.0),
        ("const3", gen_constant(50, 3, 5).unwrap(), 3, 3072.0),
        ("noise3", gen_noise(50, 3, 5).unwrap(), 3, 3072.0),
    ] {
        let vals: Vec<f64> = (0..b.len())
            .map(|i| png_complexity_bits(b.image(i), ch).unwrap() / d)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        println!("{name}: mean {mean:.4} bits/dim (min {min:.4}, max {max:.4})");
    }
}
