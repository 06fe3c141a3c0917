use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nested coarse/granular group taxonomy.
///
/// Every granular group belongs to exactly one coarse group, and every coarse
/// group owns a sentinel granular group named `<coarse>*` holding patients who
/// reported only the coarse label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    coarse: Vec<String>,
    granular: Vec<String>,
    parent: Vec<usize>,
    asterisk: Vec<usize>,
}

#[derive(Debug, Deserialize)]
struct TaxonomyRow {
    granular_id: String,
    coarse_id: String,
}

impl Taxonomy {
    /// Builds a taxonomy from `(granular, coarse)` pairs. Coarse groups are
    /// ordered by first appearance, granular groups keep input order.
    pub fn from_pairs<G, C>(pairs: impl IntoIterator<Item = (G, C)>) -> Result<Self>
    where
        G: Into<String>,
        C: Into<String>,
    {
        let mut coarse: Vec<String> = Vec::new();
        let mut granular = Vec::new();
        let mut parent = Vec::new();
        for (g, c) in pairs {
            let (g, c) = (g.into(), c.into());
            if g.is_empty() || c.is_empty() {
                return Err(Error::Taxonomy("empty identifier".into()));
            }
            let ci = match coarse.iter().position(|x| *x == c) {
                Some(i) => i,
                None => {
                    coarse.push(c);
                    coarse.len() - 1
                }
            };
            if granular.contains(&g) {
                return Err(Error::Taxonomy(format!("granular group {g:?} listed twice")));
            }
            granular.push(g);
            parent.push(ci);
        }
        if let Some(g) = granular.iter().find(|g| coarse.contains(g)) {
            return Err(Error::Taxonomy(format!(
                "identifier {g:?} used as both coarse and granular"
            )));
        }
        let mut asterisk = Vec::with_capacity(coarse.len());
        for (ci, c) in coarse.iter().enumerate() {
            let name = format!("{c}*");
            match granular.iter().position(|g| *g == name) {
                Some(gi) if parent[gi] == ci => asterisk.push(gi),
                Some(_) => {
                    return Err(Error::Taxonomy(format!("{name:?} nested under another coarse group")))
                }
                None => {
                    return Err(Error::Taxonomy(format!(
                        "coarse group {c:?} lacks its asterisk group {name:?}"
                    )))
                }
            }
        }
        Ok(Self {
            coarse,
            granular,
            parent,
            asterisk,
        })
    }

    /// Reads a `granular_id,coarse_id` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut pairs = Vec::new();
        for (i, row) in reader.deserialize::<TaxonomyRow>().enumerate() {
            let row = row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?;
            pairs.push((row.granular_id, row.coarse_id));
        }
        Self::from_pairs(pairs)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let io = |e: csv::Error| csv_error(path, e);
        w.write_record(["granular_id", "coarse_id"]).map_err(io)?;
        for (g, &c) in self.granular.iter().zip(&self.parent) {
            w.write_record([g.as_str(), self.coarse[c].as_str()]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// The 4 coarse / 26 granular taxonomy of the MIMIC-IV-ED race field.
    pub fn standard() -> Self {
        Self::from_pairs(STANDARD_GROUPS.iter().map(|(g, c, _, _)| (*g, *c)))
            .expect("built-in taxonomy is valid")
    }

    pub fn coarse_names(&self) -> &[String] {
        &self.coarse
    }

    pub fn granular_names(&self) -> &[String] {
        &self.granular
    }

    pub fn n_coarse(&self) -> usize {
        self.coarse.len()
    }

    pub fn n_granular(&self) -> usize {
        self.granular.len()
    }

    pub fn coarse_of(&self, granular: usize) -> usize {
        self.parent[granular]
    }

    pub fn asterisk_of(&self, coarse: usize) -> usize {
        self.asterisk[coarse]
    }

    pub fn is_asterisk(&self, granular: usize) -> bool {
        self.asterisk[self.parent[granular]] == granular
    }

    /// Granular members of a coarse group, in taxonomy order.
    pub fn members(&self, coarse: usize) -> Vec<usize> {
        (0..self.granular.len())
            .filter(|&g| self.parent[g] == coarse)
            .collect()
    }

    pub fn granular_index(&self, name: &str) -> Option<usize> {
        self.granular.iter().position(|g| g == name)
    }

    pub fn coarse_index(&self, name: &str) -> Option<usize> {
        self.coarse.iter().position(|c| c == name)
    }

    pub(crate) fn granular_lookup(&self) -> HashMap<&str, usize> {
        self.granular
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect()
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        },
        _ => Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        },
    }
}

/// `(granular, coarse, patients, stays)` as tabulated for MIMIC-IV-ED.
pub const STANDARD_GROUPS: [(&str, &str, u32, u32); 26] = [
    ("Asian*", "Asian", 4_997, 7_215),
    ("Chinese", "Asian", 4_027, 7_271),
    ("Indian", "Asian", 859, 1_549),
    ("SE Asian", "Asian", 828, 1_512),
    ("Korean", "Asian", 500, 774),
    ("Black*", "Black", 25_496, 76_118),
    ("Cape Verdean", "Black", 2_677, 7_588),
    ("African", "Black", 2_349, 4_837),
    ("Caribbean", "Black", 1_574, 3_625),
    ("Hispanic/Latino*", "Hispanic/Latino", 2_019, 3_070),
    ("Puerto Rican", "Hispanic/Latino", 4_169, 13_913),
    ("Dominican", "Hispanic/Latino", 3_060, 8_260),
    ("Guatemalan", "Hispanic/Latino", 991, 2_323),
    ("Mexican", "Hispanic/Latino", 671, 1_252),
    ("Salvadoran", "Hispanic/Latino", 633, 1_482),
    ("Colombian", "Hispanic/Latino", 595, 1_296),
    ("South American", "Hispanic/Latino", 496, 1_055),
    ("Honduran", "Hispanic/Latino", 357, 995),
    ("Central American", "Hispanic/Latino", 306, 780),
    ("Cuban", "Hispanic/Latino", 250, 779),
    ("White*", "White", 117_403, 224_969),
    ("Other Eur.", "White", 4_221, 8_916),
    ("Russian", "White", 2_041, 6_018),
    ("Brazilian", "White", 820, 1_466),
    ("Eastern Eur.", "White", 611, 1_297),
    ("Portuguese", "White", 586, 1_427),
];
