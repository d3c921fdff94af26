//! Ways of laying out query tokens against multi-granularity targets.

use super::config::BreenConfig;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::sequence::QueryBlock;

/// Where a stride's prediction comes from: the projected output of query
/// block `block`, average-pooled by `pool` (1 = used as is).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetSource {
    pub stride: usize,
    pub block: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryLayout {
    pub blocks: Vec<QueryBlock>,
    pub targets: Vec<TargetSource>,
}

impl QueryLayout {
    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len).sum()
    }
}

pub trait AlignScheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn layout(&self, config: &BreenConfig) -> Result<QueryLayout>;
}

/// One query block per stride, concatenated in granularity order.
pub struct Concat;

impl AlignScheme for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn layout(&self, config: &BreenConfig) -> Result<QueryLayout> {
        let g = config.teacher_grid;
        let strides = config.order.arrange(&config.strides);
        Ok(QueryLayout {
            blocks: strides
                .iter()
                .map(|&s| QueryBlock {
                    stride: s,
                    len: (g / s) * (g / s),
                })
                .collect(),
            targets: strides
                .iter()
                .enumerate()
                .map(|(block, &stride)| TargetSource { stride, block, pool: 1 })
                .collect(),
        })
    }
}

/// A single block at the finest stride; coarser targets are matched by
/// average-pooling its projected outputs.
pub struct AvgPool;

impl AlignScheme for AvgPool {
    fn name(&self) -> &'static str {
        "avgpool"
    }

    fn layout(&self, config: &BreenConfig) -> Result<QueryLayout> {
        let Some(&fine) = config.strides.iter().min() else {
            return Ok(QueryLayout { blocks: vec![], targets: vec![] });
        };
        let g = config.teacher_grid;
        let mut targets = Vec::new();
        for stride in config.order.arrange(&config.strides) {
            if stride % fine != 0 || (g / fine) % (stride / fine) != 0 {
                return Err(Error::Geometry(format!(
                    "stride {stride} is not reachable by pooling the stride-{fine} grid"
                )));
            }
            targets.push(TargetSource {
                stride,
                block: 0,
                pool: stride / fine,
            });
        }
        Ok(QueryLayout {
            blocks: vec![QueryBlock {
                stride: fine,
                len: (g / fine) * (g / fine),
            }],
            targets,
        })
    }
}

pub type SchemeCtor = fn() -> Box<dyn AlignScheme>;

pub fn scheme_registry() -> Registry<SchemeCtor> {
    Registry::<SchemeCtor>::new("alignment scheme")
        .register("concat", || Box::new(Concat))
        .register("avgpool", || Box::new(AvgPool))
}

pub fn query_layout(config: &BreenConfig) -> Result<QueryLayout> {
    let scheme = (scheme_registry().get(&config.align_scheme)?)();
    scheme.layout(config)
}
