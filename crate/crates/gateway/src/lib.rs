//! File plumbing, CLI commands and the local editing service.

pub mod commands;
pub mod dataset;
pub mod images;
pub mod service;

use std::path::{Path, PathBuf};

use splatgrade::color::PaletteError;
use splatgrade::editing::EditError;
use splatgrade::formats::FormatError;
use splatgrade::rasterizer::RasterError;
use splatgrade::scene::SceneError;
use splatgrade::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image: {0}")]
    Image(String),
    #[error("config: {0}")]
    Config(String),
    #[error("view {view} out of range ({count} views)")]
    UnknownView { view: usize, count: usize },
    #[error("image {index} is {found:?}, manifest says {expected:?}")]
    ImageSize { index: usize, expected: (usize, usize), found: (usize, usize) },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Palette(#[from] PaletteError),
    #[error("server: {0}")]
    Server(String),
}

impl GatewayError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;
