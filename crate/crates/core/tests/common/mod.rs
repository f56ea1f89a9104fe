#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use talkstyle::config::RunConfig;

/// Default corpus with every training stage cut down to a handful of steps.
pub fn quick_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_root = root.to_path_buf();
    cfg.expert.steps = 20;
    cfg.semantic.steps = 10;
    cfg.semantic.bank_size = 64;
    cfg.style.steps = 8;
    cfg.diffusion.t_steps = 10;
    cfg.diffusion.steps = 6;
    cfg.diffusion.eval_every = 3;
    cfg.diffusion.d_model = 16;
    cfg.diffusion.blocks = 2;
    cfg.diffusion.heads = 2;
    cfg.eval.ablation_seeds = vec![0];
    cfg
}

/// Every file under `root`, keyed by relative path.
pub fn snapshot_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}
