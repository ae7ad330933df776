use std::fmt::Write as _;

use super::decode::{decode_events, DecodeConfig};
use super::ebf1::{eb_f1, MatchConfig};
use crate::dataset::Clip;
use crate::error::Result;
use crate::events::EventTable;
use crate::model::{AstSed, FrameSource};
use crate::parallel;
use crate::tensor::{ParamTree, Real};

/// Per-class detection quality when the decoder sees a single frequency row.
#[derive(Clone, Debug, PartialEq)]
pub struct BandHistogram {
    pub classes: Vec<String>,
    /// `[class][row]`, each class scaled so its best row is 1.
    pub values: Vec<Vec<Real>>,
    /// Unnormalized class-wise EB-F1 per row.
    pub raw: Vec<Vec<Real>>,
}

impl BandHistogram {
    pub fn argmax(&self, class: usize) -> usize {
        let v = &self.values[class];
        (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
    }

    pub fn to_csv(&self) -> String {
        let rows = self.values.first().map_or(0, Vec::len);
        let mut out = String::from("class");
        for f in 0..rows {
            write!(out, ",row{f}").unwrap();
        }
        out.push('\n');
        for (c, v) in self.classes.iter().zip(&self.values) {
            out.push_str(c);
            for x in v {
                write!(out, ",{x:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Divides each row of `raw` by its maximum; all-zero rows stay zero.
pub fn normalize_rows(raw: &[Vec<Real>], classes: &[String]) -> Vec<Vec<Real>> {
    raw.iter()
        .zip(classes)
        .map(|(v, c)| {
            let m = v.iter().copied().fold(0.0, Real::max);
            if m > 0.0 {
                v.iter().map(|x| x / m).collect()
            } else {
                log::warn!("class `{c}` is never detected from any single frequency row");
                vec![0.0; v.len()]
            }
        })
        .collect()
}

/// Runs the model once per frequency-patch row, feeding that row alone to the
/// decoder, and records class-wise EB-F1 for each row.
pub fn band_activation_analysis(
    model: &AstSed,
    params: &ParamTree,
    clips: &[Clip],
    classes: &[String],
    dc: &DecodeConfig,
    mc: &MatchConfig,
) -> Result<BandHistogram> {
    let rows = model.config().freq_patches();
    if rows == 1 {
        log::warn!("only one frequency-patch row; band analysis is degenerate");
    }
    let refs: EventTable = clips.iter().map(|c| (c.name.clone(), c.events.clone().unwrap_or_default())).collect();
    let mut raw = vec![vec![0.0; rows]; classes.len()];
    for f in 0..rows {
        let ests = parallel::try_map_indexed(clips.len(), |i| -> Result<(String, _)> {
            let p = model.predict_with(params, &clips[i].spec, FrameSource::Row(f))?;
            Ok((clips[i].name.clone(), decode_events(&p.frame_probs, classes, p.seconds_per_step, dc)?))
        })?;
        let rep = eb_f1(&refs, &ests.into_iter().collect(), classes, mc);
        for (c, name) in classes.iter().enumerate() {
            raw[c][f] = rep.class_f1(name);
        }
    }
    Ok(BandHistogram { classes: classes.to_vec(), values: normalize_rows(&raw, classes), raw })
}
