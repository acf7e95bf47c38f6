//! CSV writers. Floats use the shortest round-trip scientific form, so
//! files are byte-identical across runs with the same inputs.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use fedsim::engine::RoundRecord;

use crate::error::CliError;

pub type Writer = csv::Writer<BufWriter<File>>;

pub fn create(path: &Path, header: &[&str]) -> Result<Writer, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new().from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header).map_err(csv_err)?;
    Ok(w)
}

pub fn row<I, S>(w: &mut Writer, fields: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(fields).map_err(csv_err)
}

pub fn finish(mut w: Writer) -> Result<(), CliError> {
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::Io(io),
        other => CliError::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub const TRAJECTORY_HEADER: [&str; 7] = ["round", "step", "eta", "loss", "dist_opt", "selected", "status"];

pub fn trajectory_row(r: &RoundRecord) -> [String; 7] {
    let selected: Vec<String> = r.selected.iter().map(usize::to_string).collect();
    [
        r.round.to_string(),
        r.step.to_string(),
        num(r.eta),
        num(r.loss),
        opt_num(r.dist_opt),
        selected.join(";"),
        "ok".into(),
    ]
}
