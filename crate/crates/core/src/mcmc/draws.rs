//! Posterior draw storage: per-chain CSV tables plus a JSON address book.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::mcmc::sampler::BlockAcceptance;
use crate::mcmc::state::{Layout, ParamState};

/// Stable name-to-column map shared by every chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressBook {
    pub schema_version: u32,
    pub layout: Layout,
    pub names: Vec<String>,
    /// Dataset row of each case, in the order used by `class_counts`.
    pub case_indices: Vec<usize>,
}

impl AddressBook {
    pub fn new(layout: Layout, case_indices: Vec<usize>) -> Self {
        Self { schema_version: SCHEMA_VERSION, names: layout.names(), layout, case_indices }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Kept draws of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDraws {
    pub chain: usize,
    pub seed: u64,
    /// Sweep number (1-based, burn-in included) of each kept draw.
    pub iterations: Vec<usize>,
    /// One flattened parameter row per kept draw.
    pub values: Vec<Vec<f64>>,
    pub loglik: Vec<f64>,
    /// `class_counts[c][l]`: kept draws allocating case `c` to class `l`.
    pub class_counts: Vec<Vec<u32>>,
    pub acceptance: Vec<BlockAcceptance>,
}

impl ChainDraws {
    pub fn new(chain: usize, seed: u64, n_cases: usize, n_causes: usize) -> Self {
        Self {
            chain,
            seed,
            iterations: Vec::new(),
            values: Vec::new(),
            loglik: Vec::new(),
            class_counts: vec![vec![0; n_causes]; n_cases],
            acceptance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn trace(&self, column: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[column]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsStore {
    pub address_book: AddressBook,
    pub chains: Vec<ChainDraws>,
}

#[derive(Serialize, Deserialize)]
struct AcceptanceFile {
    chain: usize,
    seed: u64,
    blocks: Vec<BlockAcceptance>,
}

fn chain_csv(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("chain_{c}.csv"))
}

fn classes_csv(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("chain_{c}_classes.csv"))
}

impl DrawsStore {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.address_book.index_of(name).ok_or_else(|| Error::Data(format!("no parameter named {name}")))
    }

    /// Per-chain traces of one named parameter.
    pub fn traces(&self, name: &str) -> Result<Vec<Vec<f64>>> {
        let col = self.index_of(name)?;
        Ok(self.chains.iter().map(|c| c.trace(col)).collect())
    }

    /// Every kept draw across chains, decoded.
    pub fn states(&self) -> Result<Vec<ParamState>> {
        let layout = self.address_book.layout;
        self.chains.iter().flat_map(|c| c.values.iter()).map(|row| layout.unflatten(row)).collect()
    }

    /// Posterior class probabilities per case pooled across chains.
    pub fn class_probabilities(&self) -> Vec<Vec<f64>> {
        let n_cases = self.address_book.case_indices.len();
        let l = self.address_book.layout.n_causes;
        let total: f64 = self.chains.iter().map(|c| c.len() as f64).sum();
        (0..n_cases)
            .map(|i| {
                (0..l)
                    .map(|c| self.chains.iter().map(|ch| ch.class_counts[i][c] as f64).sum::<f64>() / total)
                    .collect()
            })
            .collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(dir.join("address_book.json"), &self.address_book)?;
        let mut acceptance = Vec::with_capacity(self.chains.len());
        for ch in &self.chains {
            let path = chain_csv(dir, ch.chain);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(file);
            let mut header = vec!["iteration".to_string(), "loglik".to_string()];
            header.extend(self.address_book.names.iter().cloned());
            w.write_record(&header)?;
            for ((it, ll), row) in ch.iterations.iter().zip(&ch.loglik).zip(&ch.values) {
                let mut rec = vec![it.to_string(), ll.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            let path = classes_csv(dir, ch.chain);
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(file);
            let mut header = vec!["case".to_string()];
            header.extend((0..self.address_book.layout.n_causes).map(|l| format!("class_{l}")));
            w.write_record(&header)?;
            for (case, counts) in self.address_book.case_indices.iter().zip(&ch.class_counts) {
                let mut rec = vec![case.to_string()];
                rec.extend(counts.iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            acceptance.push(AcceptanceFile { chain: ch.chain, seed: ch.seed, blocks: ch.acceptance.clone() });
        }
        write_json(dir.join("acceptance.json"), &acceptance)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let book_path = dir.join("address_book.json");
        if !book_path.exists() {
            return Err(Error::MissingArtifact(book_path));
        }
        let address_book: AddressBook = read_json(&book_path)?;
        if address_book.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { expected: SCHEMA_VERSION, found: address_book.schema_version });
        }
        let acc_path = dir.join("acceptance.json");
        if !acc_path.exists() {
            return Err(Error::MissingArtifact(acc_path));
        }
        let acceptance: Vec<AcceptanceFile> = read_json(&acc_path)?;
        let n_causes = address_book.layout.n_causes;
        let mut chains = Vec::with_capacity(acceptance.len());
        for acc in acceptance {
            let mut ch = ChainDraws::new(acc.chain, acc.seed, address_book.case_indices.len(), n_causes);
            ch.acceptance = acc.blocks;
            let path = chain_csv(dir, acc.chain);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let mut r = csv::Reader::from_path(&path)?;
            let header = r.headers()?.clone();
            if header.len() != address_book.names.len() + 2
                || header.iter().skip(2).zip(&address_book.names).any(|(a, b)| a != b)
            {
                return Err(Error::Data(format!("{} does not match the address book", path.display())));
            }
            for rec in r.records() {
                let rec = rec?;
                let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", path.display())));
                ch.iterations.push(rec[0].parse().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
                ch.loglik.push(parse(&rec[1])?);
                ch.values.push(rec.iter().skip(2).map(parse).collect::<Result<_>>()?);
            }
            let path = classes_csv(dir, acc.chain);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let mut r = csv::Reader::from_path(&path)?;
            for (i, rec) in r.records().enumerate() {
                let rec = rec?;
                let row = ch
                    .class_counts
                    .get_mut(i)
                    .ok_or_else(|| Error::Data(format!("{} has too many rows", path.display())))?;
                for (l, v) in rec.iter().skip(1).enumerate().take(n_causes) {
                    row[l] = v.parse().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
                }
            }
            chains.push(ch);
        }
        chains.sort_by_key(|c| c.chain);
        Ok(Self { address_book, chains })
    }
}
