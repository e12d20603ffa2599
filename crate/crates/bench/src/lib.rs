//! Fixtures shared by the benchmarks.

use mqmk_core::backbone::{Backbone, BackboneConfig, PromptInsertionPlan};
use mqmk_core::data::{generate, Dataset, SynthSpec};
use mqmk_core::promptpool::{KeyGranularity, PoolState};

pub struct Fixture {
    pub backbone: Backbone,
    pub pool: PoolState,
    pub images: Dataset,
}

/// Default-sized backbone with a pool of `tasks` four-class entries.
pub fn fixture(tasks: usize) -> Fixture {
    let config = BackboneConfig::default();
    let backbone = Backbone::new(config, 1).expect("default config is valid");
    let classes = 4 * tasks;
    let mut pool = PoolState::new(PromptInsertionPlan::default(), config.embed_dim, classes, 1);
    for t in 0..tasks {
        let ids: Vec<usize> = (4 * t..4 * t + 4).collect();
        pool.expand(&ids, KeyGranularity::Class)
            .expect("disjoint classes");
    }
    let spec = SynthSpec::from_family(
        7,
        0,
        classes,
        2,
        1,
        config.image_size,
        config.channels,
        0.1,
        3,
    );
    let images = generate(&spec).expect("valid spec").train;
    Fixture {
        backbone,
        pool,
        images,
    }
}
