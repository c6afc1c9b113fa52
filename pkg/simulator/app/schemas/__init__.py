# Document schemas (crystal definitions, experiment configs, run manifests)
