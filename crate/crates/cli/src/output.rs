use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use nvreadout::io::{write_json, Document, FileFormat, Metadata};
use nvreadout::Result;
use serde::Serialize;

use crate::args::{Cli, Format};

/// Where and how a command writes its result.
pub struct Sink<'a> {
    pub format: Format,
    path: Option<&'a Path>,
    pub metadata: Metadata,
}

impl<'a> Sink<'a> {
    /// Resolves the format and records the full configuration as metadata.
    pub fn new(cli: &'a Cli) -> Result<Self> {
        let path = cli.output.as_deref();
        let format = match (cli.format, path) {
            (Some(f), _) => f,
            (None, Some(p)) if FileFormat::from_path(p) == FileFormat::Json => Format::Json,
            _ => Format::Csv,
        };
        let mut metadata = Metadata::new();
        metadata.insert("command".into(), cli.command.name().into());
        metadata.insert("config".into(), serde_json::to_string(cli)?);
        metadata.insert("seed".into(), cli.seed.to_string());
        metadata.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        Ok(Self { format, path, metadata })
    }

    /// Copy with extra metadata entries.
    pub fn with_metadata<I, K, V>(&self, extra: I) -> Sink<'a>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut metadata = self.metadata.clone();
        metadata.extend(extra.into_iter().map(|(k, v)| (k.into(), v.into())));
        Sink { format: self.format, path: self.path, metadata }
    }

    pub fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match self.path {
            Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| {
                io::Error::new(e.kind(), format!("{}: {e}", p.display()))
            })?)),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }

    /// Writes `data` as JSON or through the CSV writer.
    pub fn emit<T: Serialize>(
        &self,
        data: &T,
        csv: impl FnOnce(&mut dyn Write, &Metadata) -> Result<()>,
    ) -> Result<()> {
        let mut out = self.writer()?;
        match self.format {
            Format::Json => write_json(
                &mut out,
                &Document { metadata: self.metadata.clone(), data },
            )?,
            Format::Csv => csv(&mut out, &self.metadata)?,
        }
        out.flush()?;
        Ok(())
    }
}
