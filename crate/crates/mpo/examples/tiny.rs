use mpo::pipeline::{run_seed, ExperimentConfig, Variant};
fn main() {
    for (thr, rm_steps) in [(0.05, 80usize), (0.1, 200), (0.05, 200)] {
        let tmp = tempfile::tempdir().unwrap();
        let mut config = ExperimentConfig::default();
        config.world.vocab_size = 8;
        config.world.prompt_len = 4;
        config.world.completion_len = 4;
        config.data.n_train_prompts = 120;
        config.data.n_heldout_prompts = 30;
        config.data.eval_samples_per_prompt = 2;
        config.sft.steps = 60;
        config.rm.steps = rm_steps;
        config.dpo.steps = 40;
        config.threshold = thr;
        config.rl.steps = 6;
        config.rl.rollouts_per_iter = 16;
        config.seeds = vec![1];
        config.output_dir = tmp.path().to_path_buf();
        config.variant = Variant::Mpo;
        match run_seed(&config, 1) {
            Ok(run) => {
                let m = mpo::pipeline::manifest::Manifest::read(&run.dir.join("manifest.json")).unwrap();
                let sel = m.stages.iter().find(|s| s.name == "select").unwrap();
                println!("thr={thr} rm_steps={rm_steps}: OK {}", sel.detail.as_deref().unwrap_or(""));
            }
            Err(e) => println!("thr={thr} rm_steps={rm_steps}: ERR {e}"),
        }
    }
}
