// quick parameter sweep driver (not part of the repo)
use blocksparse_core::config::RunConfig;
use blocksparse_core::pipeline::run_bench_recall;
fn main() {
    for (scale, noise) in [(6.0, 0.1), (8.0, 0.1), (12.0, 0.1), (8.0, 0.05), (12.0, 0.05), (16.0, 0.1)] {
        let mut cfg = RunConfig::recall_benchmark_default();
        cfg.synth.layer_scales = vec![scale];
        cfg.synth.cluster_noise = noise;
        cfg.output_dir = std::path::PathBuf::from(format!("/tmp/sweep_{scale}_{noise}"));
        let seeds: Vec<u64> = (0..10).collect();
        let reports = run_bench_recall(&cfg, &seeds).unwrap();
        let mut wins = 0; let mut ties = 0; let mut budgets = vec![];
        for pair in reports.chunks(2) {
            if pair[0].covered_fraction > pair[1].covered_fraction { wins += 1; }
            else if pair[0].covered_fraction == pair[1].covered_fraction { ties += 1; }
            budgets.push(pair[0].budget_pairs);
        }
        println!("scale={scale} noise={noise}: co-wins={wins} ties={ties} km-wins={} budgets={budgets:?}", 10-wins-ties);
    }
}
