use rand::Rng;

use crate::data::{sample_sparse, synth_scene, DepthMap, Scene};
use crate::error::Result;
use crate::hourglass::{NetInput, Network};

use super::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train.scenes", "train.sampling"),
            Split::Eval => ("eval.scenes", "eval.sampling"),
        }
    }
}

/// Scenes with their fixed sparse inputs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub sparse: Vec<DepthMap>,
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig, split: Split) -> Result<Dataset> {
        let d = &cfg.data;
        let count = match split {
            Split::Train => d.train_scenes,
            Split::Eval => d.eval_scenes,
        };
        let (scene_stream, sample_stream) = split.stream_names();
        let mut scene_rng = cfg.stream(scene_stream);
        let mut sample_rng = cfg.stream(sample_stream);
        let mut scenes = Vec::with_capacity(count);
        let mut sparse = Vec::with_capacity(count);
        for _ in 0..count {
            let scene = synth_scene(scene_rng.gen(), d.height, d.width, d.objects)?;
            sparse.push(sample_sparse(&scene.depth, d.pattern, sample_rng.gen())?);
            scenes.push(scene);
        }
        Ok(Dataset { scenes, sparse })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Ground truth for the listed scenes.
    pub fn targets(&self, idx: &[usize]) -> Vec<DepthMap> {
        idx.iter().map(|&i| self.scenes[i].depth.clone()).collect()
    }

    pub fn input(&self, net: &Network, idx: &[usize]) -> Result<NetInput> {
        let rgb: Vec<_> = idx.iter().map(|&i| &self.scenes[i].rgb).collect();
        let masks: Vec<_> = idx.iter().map(|&i| self.scenes[i].mask.clone()).collect();
        let sparse: Vec<_> = idx.iter().map(|&i| self.sparse[i].clone()).collect();
        net.prepare(&rgb, &masks, &sparse)
    }

    /// Consecutive batches covering every scene once, in order.
    pub fn batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }
}
