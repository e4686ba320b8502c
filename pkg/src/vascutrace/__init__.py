"""Artery centerline reconstruction from tracked ultrasound sweeps over synthetic phantoms.

Modules: ``geom`` (frames, transforms, ICP), ``phantom`` (phantoms and the
ultrasound simulator), ``trajectory`` (probe path planning), ``calib``
(US image, eye-to-hand and phantom calibration), ``segnet`` (lumen
segmentation), ``reconstruct`` (centerline lifting and scoring),
``pipeline`` and ``cli`` (orchestration).
"""

__version__ = "0.1.0"
