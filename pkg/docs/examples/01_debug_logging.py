import logging

import lreidpy

# Configure logging to high verbosity (DEBUG)
fmt = '%(asctime)s %(levelname)8s: %(message)s'
logging.basicConfig(format=fmt, level=logging.DEBUG)
log = logging.getLogger(__name__)

spec = lreidpy.SyntheticSpec(identities=8, test_identities=4, samples_per_identity=(4, 4), input_dim=8)
domains = [lreidpy.generate_domain(spec, index) for index in range(3)]
stream, unseen = lreidpy.build_stream(domains[:2], unseen=domains[2:])

config = lreidpy.TrainConfig(epochs=2, identities_per_batch=4, samples_per_identity=2, num_vertices=4, embedding_dim=8)
trainer = lreidpy.make_baseline('aka', config, stream.domains[0].input_shape)
trainer.on('step_end', lambda step, snapshot: log.info('Step %d finished', step))

trainer.run_stream(stream, unseen)
