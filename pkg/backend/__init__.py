# MoNet harness backend
