// debug: inspect encodings and recon NLL spread
use lrvae::data::gen_noise;
use lrvae::vae::{encode, VaeConfig, VaeModel};
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
    let m = VaeModel::init(
        VaeConfig { nz: 6, nf: 4, nc: 1, beta: 1.0, capacity_multiplier: 1.0 },
        &mut rng,
    )
    .unwrap();
    let pool = gen_noise(10, 1, 3).unwrap();
    let tau = encode(&m, &pool).unwrap();
    for i in 0..4 {
        println!("mu[{i}] = {:?}", &tau.mu.data()[i*6..(i+1)*6]);
    }
}
