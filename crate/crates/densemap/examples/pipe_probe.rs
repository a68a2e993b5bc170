use densemap::pipeline::*;
use densemap::mvs::MvsConfig;

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig {
        mode: Mode::Synth,
        output: dir.path().join("run"),
        every_k: 3,
        window: 3,
        synth: SynthSequenceConfig { frames: 10, arc_degrees: 5.0, ..SynthSequenceConfig::default() },
        mvs: MvsConfig { planes: [32, 4, 4], ..MvsConfig::default() },
        workers: Some(2),
        ..PipelineConfig::default()
    };
    let seq = synthesize_sequence(&cfg.synth, cfg.seed).unwrap();
    let data_dir = dir.path().join("data");
    export_sequence(&data_dir, &seq).unwrap();
    cfg.mode = Mode::MappingOnly;
    cfg.dataset = Some(data_dir);
    let artifacts = run(&cfg).unwrap();
    let d = artifacts.report.depth.as_ref().unwrap();
    for (i, m) in d.per_image.iter().enumerate() {
        println!("kf {i}: a1 {:.2} abs {:.2}cm cov {:.1}% n {}", m.a1_pct, m.abs_cm, m.coverage_pct, m.n);
    }
}
