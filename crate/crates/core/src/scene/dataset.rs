use super::camera::{Camera, Resolution};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A camera at one normalized time, with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub time: f64,
    pub ground_truth: Option<ImageBuffer>,
    pub split: Split,
}

impl View {
    pub fn new(camera: Camera, time: f64, split: Split) -> Result<Self> {
        if !(0.0..=1.0).contains(&time) {
            return Err(Error::param(format!("view time {time} outside [0, 1]")));
        }
        Ok(Self {
            camera,
            time,
            ground_truth: None,
            split,
        })
    }

    pub fn with_ground_truth(mut self, image: ImageBuffer) -> Result<Self> {
        let res = self.camera.resolution();
        if image.height() != res.height || image.width() != res.width {
            return Err(Error::input("ground truth resolution differs from camera"));
        }
        self.ground_truth = Some(image);
        Ok(self)
    }

    pub fn resolution(&self) -> Resolution {
        self.camera.resolution()
    }

    pub fn gt(&self) -> Result<&ImageBuffer> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| Error::input("view has no ground-truth image"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    views: Vec<View>,
}

impl Dataset {
    pub fn new(views: Vec<View>) -> Result<Self> {
        if !views.iter().any(|v| v.split == Split::Train) {
            return Err(Error::input("dataset needs at least one train view"));
        }
        let mut shapes = views
            .iter()
            .filter_map(|v| v.ground_truth.as_ref().map(|g| (g.height(), g.width())));
        if let Some(first) = shapes.next() {
            if shapes.any(|s| s != first) {
                return Err(Error::input("ground-truth images differ in resolution"));
            }
        }
        Ok(Self { views })
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view(&self, i: usize) -> &View {
        &self.views[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].split == split).collect()
    }

    pub fn train(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Test)
    }

    /// Latest earlier-in-time view taken by the same camera, if any.
    pub fn temporal_predecessor(&self, index: usize) -> Option<usize> {
        let v = &self.views[index];
        (0..self.views.len())
            .filter(|&j| j != index)
            .filter(|&j| self.views[j].camera == v.camera && self.views[j].time < v.time)
            .max_by(|&a, &b| self.views[a].time.total_cmp(&self.views[b].time))
    }
}
