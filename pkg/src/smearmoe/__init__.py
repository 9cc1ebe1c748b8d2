"""Multi-expert projector zoo with SMEAR parameter merging."""
