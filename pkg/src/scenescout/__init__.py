"""scenescout: layout-aware multimodal asset retrieval on a synthetic world.

Subpackages are flat modules, one per subsystem:

- ``nn``              dense numeric kernel (MLPs, Adam, stable reductions)
- ``scenegraph``      typed scene graphs, rigid transforms, JSON serialization
- ``layout_encoder``  SE(3)-equivariant graph encoder producing layout embeddings
- ``fusion``          modality bundles, fusion towers, query composition
- ``losses``          contrastive objectives with analytic gradients
- ``gallery``         embedding store, exact top-k search, binary persistence
- ``composer``        iterative retrieve-and-place scene composition
- ``synthworld``      deterministic synthetic assets, scenes, and batches
- ``training``        two-stage training driver and evaluation
- ``cli``             command-line entry point
"""

__version__ = "0.1.0"
