//! Dataset preparation shared by the CLI and the benchmark: load or
//! synthesize vectors, split them, build ground truth and persist
//! everything as corpus-format files.

use std::path::{Path, PathBuf};

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::io::{
    brute_force_neighbours, read_bvecs, read_fvecs, read_ivecs, self_neighbours, split_dataset,
    write_fvecs, write_ivecs, NeighbourTable, VectorSet,
};
use crate::synth::generate_mixture;

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: VectorSet,
    pub query: VectorSet,
    pub database: VectorSet,
    /// query → database neighbours (ascending distance)
    pub gt: NeighbourTable,
    /// self-neighbours of the training split (triplet supervision)
    pub train_neighbours: NeighbourTable,
}

pub struct PreparedPaths {
    pub train: PathBuf,
    pub query: PathBuf,
    pub database: PathBuf,
    pub gt: PathBuf,
    pub train_neighbours: PathBuf,
}

impl PreparedPaths {
    pub fn in_dir(dir: &Path) -> Self {
        PreparedPaths {
            train: dir.join("train.fvecs"),
            query: dir.join("query.fvecs"),
            database: dir.join("database.fvecs"),
            gt: dir.join("gt.ivecs"),
            train_neighbours: dir.join("train_neighbours.ivecs"),
        }
    }

    pub fn all_exist(&self) -> bool {
        [&self.train, &self.query, &self.database, &self.gt, &self.train_neighbours]
            .iter()
            .all(|p| p.exists())
    }
}

fn read_corpus(path: &Path, source: &str) -> Result<VectorSet> {
    match source {
        "fvecs" => read_fvecs(path),
        "bvecs" => read_bvecs(path),
        other => Err(Error::Config(format!("unknown data source `{other}`"))),
    }
}

/// Builds the splits and both neighbour tables in memory.
pub fn prepare(config: &AppConfig) -> Result<PreparedData> {
    let d = &config.data;
    let (train, query, database) = match d.source.as_str() {
        "synthetic" => {
            let total = d.train + d.query + d.database;
            let all = generate_mixture(&config.synthetic, total, config.seed)?;
            let split = split_dataset(&all, (d.train, d.query, d.database), config.seed ^ 1)?;
            (
                all.subset(&split.train)?,
                all.subset(&split.query)?,
                all.subset(&split.database)?,
            )
        }
        source => {
            let base = read_corpus(&d.path, source)?;
            let use_learn_file = d.train_source == "learn"
                && !d.learn_path.as_os_str().is_empty();
            if use_learn_file {
                let learn = read_corpus(&d.learn_path, source)?;
                let lsplit = split_dataset(&learn, (d.train, 0, 0), config.seed ^ 1)?;
                let bsplit = split_dataset(&base, (0, d.query, d.database), config.seed ^ 2)?;
                (
                    learn.subset(&lsplit.train)?,
                    base.subset(&bsplit.query)?,
                    base.subset(&bsplit.database)?,
                )
            } else {
                let split = split_dataset(&base, (d.train, d.query, d.database), config.seed ^ 1)?;
                (
                    base.subset(&split.train)?,
                    base.subset(&split.query)?,
                    base.subset(&split.database)?,
                )
            }
        }
    };
    let gt = brute_force_neighbours(&query, &database, d.neighbour_k)?;
    let train_neighbours = self_neighbours(&train, d.neighbour_k)?;
    Ok(PreparedData { train, query, database, gt, train_neighbours })
}

pub fn write_prepared(data: &PreparedData, dir: &Path) -> Result<PreparedPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = PreparedPaths::in_dir(dir);
    write_fvecs(&paths.train, &data.train)?;
    write_fvecs(&paths.query, &data.query)?;
    write_fvecs(&paths.database, &data.database)?;
    write_ivecs(&paths.gt, &data.gt)?;
    write_ivecs(&paths.train_neighbours, &data.train_neighbours)?;
    Ok(paths)
}

pub fn load_prepared(dir: &Path) -> Result<PreparedData> {
    let paths = PreparedPaths::in_dir(dir);
    Ok(PreparedData {
        train: read_fvecs(&paths.train)?,
        query: read_fvecs(&paths.query)?,
        database: read_fvecs(&paths.database)?,
        gt: read_ivecs(&paths.gt)?,
        train_neighbours: read_ivecs(&paths.train_neighbours)?,
    })
}

/// Loads previously prepared splits when present, otherwise prepares and
/// persists them.
pub fn prepare_if_needed(config: &AppConfig, dir: &Path) -> Result<PreparedData> {
    if PreparedPaths::in_dir(dir).all_exist() {
        load_prepared(dir)
    } else {
        let data = prepare(config)?;
        write_prepared(&data, dir)?;
        Ok(data)
    }
}
