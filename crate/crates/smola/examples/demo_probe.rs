use smola::trainer::*;

fn main() {
    let spec = MixtureSpec::default();
    let mixture = make_mixture(&spec, 7).unwrap();
    let opts = TrainOptions { steps: 2000, lr: 0.05, eval_every: 100, seed: 7, ..Default::default() };
    let t0 = std::time::Instant::now();
    let gm = train(build_gated_moe_arm(&mixture, 4, 16, 7).unwrap(), &mixture, &opts);
    match &gm {
        Ok(s) => println!("gated-moe final {:.6} params {}", s.final_avg_loss().unwrap(), s.model.num_params()),
        Err(e) => println!("gated-moe error: {e}"),
    }
    let lm = train(build_lora_mixture_arm(&mixture, 8, 2, 1.0, 7).unwrap(), &mixture, &opts);
    match &lm {
        Ok(s) => println!("lora-mixture final {:.6} params {}", s.final_avg_loss().unwrap(), s.model.num_params()),
        Err(e) => println!("lora-mixture error: {e}"),
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());

    // Seed robustness of the omni-vs-lora gap (informational).
    for seed in [1u64, 2, 3] {
        let m = make_mixture(&spec, seed).unwrap();
        let o = build_omni_arm(&m, 8, 2, 1.0, 1.0, seed).unwrap();
        let rank = matched_lora_rank(&m, o.num_params());
        let opts = TrainOptions { steps: 2000, lr: 0.05, eval_every: 100, seed, ..Default::default() };
        let s1 = train(o, &m, &opts).unwrap();
        let s2 = train(build_lora_arm(&m, rank, 1.0, seed).unwrap(), &m, &opts).unwrap();
        println!("seed {seed}: omni {:.6} lora {:.6} ok={}", s1.final_avg_loss().unwrap(), s2.final_avg_loss().unwrap(), s1.final_avg_loss().unwrap() <= s2.final_avg_loss().unwrap());
    }
}
