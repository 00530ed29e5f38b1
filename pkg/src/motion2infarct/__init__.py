"""Infarct labelling on 4D cardiac surface meshes."""
